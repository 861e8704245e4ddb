//! Explicit Runge–Kutta integrators with Hermite dense output.
//!
//! The adaptive scheme is the Dormand–Prince 5(4) pair with FSAL and a PI-free
//! standard step controller; the fixed-step scheme is classical RK4. Both
//! record `(t, y, y')` at every accepted step so trajectories can be
//! interpolated by cubic Hermite segments.

use crate::error::{Error, Result};

/// Right-hand side `y' = f(t, y)`.
pub trait Rhs {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<()>;
}

impl<F> Rhs for (usize, F)
where
    F: Fn(f64, &[f64], &mut [f64]) -> Result<()>,
{
    fn dim(&self) -> usize {
        self.0
    }
    fn eval(&self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        (self.1)(t, y, dy)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdaptiveOptions {
    pub rtol: f64,
    pub atol: f64,
    pub h0: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub max_steps: usize,
}

impl AdaptiveOptions {
    pub fn with_tol(tol: f64) -> Self {
        AdaptiveOptions { rtol: tol, atol: tol, h0: 1e-3, h_min: 1e-14, h_max: f64::INFINITY, max_steps: 200_000 }
    }
}

/// Why an integration stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stop {
    /// Reached the requested end of the interval.
    End,
    /// Event function with the given index crossed zero upward.
    Event(usize),
    /// Step size fell below the floor.
    StepUnderflow,
    /// Step budget exhausted.
    MaxSteps,
}

/// Accepted steps of an integration, with derivatives for dense output.
#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub y: Vec<Vec<f64>>,
    pub dy: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn push(&mut self, t: f64, y: &[f64], dy: &[f64]) {
        self.t.push(t);
        self.y.push(y.to_vec());
        self.dy.push(dy.to_vec());
    }

    pub fn t_first(&self) -> f64 {
        self.t[0]
    }

    pub fn t_last(&self) -> f64 {
        *self.t.last().unwrap()
    }

    /// Index `k` of the segment `[t_k, t_{k+1}]` containing `t` (either direction).
    fn segment(&self, t: f64) -> usize {
        let n = self.t.len();
        if n < 2 {
            return 0;
        }
        let forward = self.t[n - 1] >= self.t[0];
        let (mut lo, mut hi) = (0usize, n - 1);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            let after = if forward { self.t[mid] <= t } else { self.t[mid] >= t };
            if after {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// Cubic Hermite interpolation at `t`, clamped to the covered interval.
    pub fn eval(&self, t: f64, out: &mut [f64]) {
        let n = self.t.len();
        if n == 1 {
            out.copy_from_slice(&self.y[0]);
            return;
        }
        let k = self.segment(t);
        hermite(self.t[k], &self.y[k], &self.dy[k], self.t[k + 1], &self.y[k + 1], &self.dy[k + 1], t, out);
    }

    /// Derivative of the Hermite interpolant at `t`.
    pub fn eval_deriv(&self, t: f64, out: &mut [f64]) {
        let n = self.t.len();
        if n == 1 {
            out.copy_from_slice(&self.dy[0]);
            return;
        }
        let k = self.segment(t);
        hermite_deriv(self.t[k], &self.y[k], &self.dy[k], self.t[k + 1], &self.y[k + 1], &self.dy[k + 1], t, out);
    }

    /// Prepend the reverse of `back` (which must start at the same point) so the
    /// result runs monotonically through both halves.
    pub fn join_reverse(back: Trajectory, fwd: Trajectory) -> Trajectory {
        let mut out = Trajectory::default();
        for k in (1..back.len()).rev() {
            out.push(back.t[k], &back.y[k], &back.dy[k]);
        }
        for k in 0..fwd.len() {
            out.push(fwd.t[k], &fwd.y[k], &fwd.dy[k]);
        }
        out
    }
}

#[allow(clippy::too_many_arguments)]
pub fn hermite(t0: f64, y0: &[f64], d0: &[f64], t1: f64, y1: &[f64], d1: &[f64], t: f64, out: &mut [f64]) {
    let h = t1 - t0;
    let s = if h == 0.0 { 0.0 } else { ((t - t0) / h).clamp(0.0, 1.0) };
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    for i in 0..out.len() {
        out[i] = h00 * y0[i] + h10 * h * d0[i] + h01 * y1[i] + h11 * h * d1[i];
    }
}

#[allow(clippy::too_many_arguments)]
pub fn hermite_deriv(t0: f64, y0: &[f64], d0: &[f64], t1: f64, y1: &[f64], d1: &[f64], t: f64, out: &mut [f64]) {
    let h = t1 - t0;
    if h == 0.0 {
        out.copy_from_slice(d0);
        return;
    }
    let s = ((t - t0) / h).clamp(0.0, 1.0);
    let s2 = s * s;
    let a = (6.0 * s2 - 6.0 * s) / h;
    let b = 3.0 * s2 - 4.0 * s + 1.0;
    let c = (-6.0 * s2 + 6.0 * s) / h;
    let d = 3.0 * s2 - 2.0 * s;
    for i in 0..out.len() {
        out[i] = a * y0[i] + b * d0[i] + c * y1[i] + d * d1[i];
    }
}

// Dormand–Prince coefficients.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Integrate from `t0` towards `t_end` (either direction) with Dormand–Prince
/// 5(4). Integration stops early when any event function crosses from negative
/// to non-negative; the crossing is located on the Hermite interpolant and
/// appended as the final sample.
pub fn dopri45<R: Rhs + ?Sized>(
    rhs: &R,
    t0: f64,
    y0: &[f64],
    t_end: f64,
    opts: &AdaptiveOptions,
    events: &[&dyn Fn(&[f64]) -> f64],
) -> Result<(Trajectory, Stop)> {
    let n = rhs.dim();
    if y0.len() != n {
        return Err(Error::Shape(format!("state length {} != {}", y0.len(), n)));
    }
    let dir = if t_end >= t0 { 1.0 } else { -1.0 };
    let mut traj = Trajectory::default();
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut k1 = vec![0.0; n];
    rhs.eval(t, &y, &mut k1)?;
    traj.push(t, &y, &k1);
    if t == t_end {
        return Ok((traj, Stop::End));
    }
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut k5 = vec![0.0; n];
    let mut k6 = vec![0.0; n];
    let mut k7 = vec![0.0; n];
    let mut ytmp = vec![0.0; n];
    let mut ynew = vec![0.0; n];
    let mut h = opts.h0.min(opts.h_max).min((t_end - t0).abs());
    let mut ev_prev: Vec<f64> = events.iter().map(|g| g(&y)).collect();
    for _ in 0..opts.max_steps {
        if h < opts.h_min {
            return Ok((traj, Stop::StepUnderflow));
        }
        let remaining = (t_end - t).abs();
        let last = h >= remaining;
        let hs = if last { remaining } else { h } * dir;

        let stage = |coeffs: &[(f64, &[f64])], ytmp: &mut [f64], y: &[f64]| {
            for i in 0..n {
                let mut acc = y[i];
                for (c, k) in coeffs {
                    acc += hs * c * k[i];
                }
                ytmp[i] = acc;
            }
        };
        stage(&[(A21, &k1)], &mut ytmp, &y);
        let ok = rhs.eval(t + C2 * hs, &ytmp, &mut k2);
        let mut failed = ok.is_err();
        if !failed {
            stage(&[(A31, &k1), (A32, &k2)], &mut ytmp, &y);
            failed = rhs.eval(t + C3 * hs, &ytmp, &mut k3).is_err();
        }
        if !failed {
            stage(&[(A41, &k1), (A42, &k2), (A43, &k3)], &mut ytmp, &y);
            failed = rhs.eval(t + C4 * hs, &ytmp, &mut k4).is_err();
        }
        if !failed {
            stage(&[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)], &mut ytmp, &y);
            failed = rhs.eval(t + C5 * hs, &ytmp, &mut k5).is_err();
        }
        if !failed {
            stage(&[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)], &mut ytmp, &y);
            failed = rhs.eval(t + hs, &ytmp, &mut k6).is_err();
        }
        if !failed {
            stage(&[(B1, &k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)], &mut ynew, &y);
            failed = rhs.eval(t + hs, &ynew, &mut k7).is_err();
        }
        if failed {
            // stepped outside the domain of the right-hand side: shrink
            h *= 0.25;
            continue;
        }
        let mut err = 0.0f64;
        for i in 0..n {
            let e = hs * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sc = opts.atol + opts.rtol * y[i].abs().max(ynew[i].abs());
            err = err.max((e / sc).abs());
        }
        if !err.is_finite() {
            h *= 0.25;
            continue;
        }
        if err <= 1.0 {
            let t_new = if last { t_end } else { t + hs };
            // event detection on the accepted step
            let ev_new: Vec<f64> = events.iter().map(|g| g(&ynew)).collect();
            let hit = (0..events.len()).find(|&j| ev_prev[j] < 0.0 && ev_new[j] >= 0.0);
            if let Some(j) = hit {
                let (mut a, mut b) = (t, t_new);
                let mut probe = vec![0.0; n];
                for _ in 0..80 {
                    let m = 0.5 * (a + b);
                    hermite(t, &y, &k1, t_new, &ynew, &k7, m, &mut probe);
                    if events[j](&probe) < 0.0 {
                        a = m;
                    } else {
                        b = m;
                    }
                }
                hermite(t, &y, &k1, t_new, &ynew, &k7, b, &mut probe);
                let mut dprobe = vec![0.0; n];
                hermite_deriv(t, &y, &k1, t_new, &ynew, &k7, b, &mut dprobe);
                if b != t {
                    traj.push(b, &probe, &dprobe);
                }
                return Ok((traj, Stop::Event(j)));
            }
            ev_prev = ev_new;
            t = t_new;
            y.copy_from_slice(&ynew);
            k1.copy_from_slice(&k7);
            traj.push(t, &y, &k1);
            if last {
                return Ok((traj, Stop::End));
            }
        }
        let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        h = (h * fac).min(opts.h_max);
    }
    Ok((traj, Stop::MaxSteps))
}

/// Classical RK4 with `steps` equal steps of size `dt` (signed). Stops early if
/// an event fires or the right-hand side leaves its domain.
pub fn rk4_fixed<R: Rhs + ?Sized>(
    rhs: &R,
    t0: f64,
    y0: &[f64],
    dt: f64,
    steps: usize,
    events: &[&dyn Fn(&[f64]) -> f64],
) -> Result<(Trajectory, Stop)> {
    let n = rhs.dim();
    let mut traj = Trajectory::default();
    let mut y = y0.to_vec();
    let mut t = t0;
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    rhs.eval(t, &y, &mut k1)?;
    traj.push(t, &y, &k1);
    for _ in 0..steps {
        for i in 0..n {
            tmp[i] = y[i] + 0.5 * dt * k1[i];
        }
        if rhs.eval(t + 0.5 * dt, &tmp, &mut k2).is_err() {
            return Ok((traj, Stop::Event(usize::MAX)));
        }
        for i in 0..n {
            tmp[i] = y[i] + 0.5 * dt * k2[i];
        }
        if rhs.eval(t + 0.5 * dt, &tmp, &mut k3).is_err() {
            return Ok((traj, Stop::Event(usize::MAX)));
        }
        for i in 0..n {
            tmp[i] = y[i] + dt * k3[i];
        }
        if rhs.eval(t + dt, &tmp, &mut k4).is_err() {
            return Ok((traj, Stop::Event(usize::MAX)));
        }
        for i in 0..n {
            y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        t += dt;
        if rhs.eval(t, &y, &mut k1).is_err() {
            return Ok((traj, Stop::Event(usize::MAX)));
        }
        traj.push(t, &y, &k1);
        if let Some(j) = events.iter().position(|g| g(&y) >= 0.0) {
            return Ok((traj, Stop::Event(j)));
        }
    }
    Ok((traj, Stop::End))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oscillator() -> (usize, impl Fn(f64, &[f64], &mut [f64]) -> Result<()>) {
        (2, |_t: f64, y: &[f64], dy: &mut [f64]| {
            dy[0] = y[1];
            dy[1] = -y[0];
            Ok(())
        })
    }

    #[test]
    fn dopri_harmonic_oscillator() {
        let sys = oscillator();
        let (tr, stop) = dopri45(&sys, 0.0, &[0.0, 1.0], 10.0, &AdaptiveOptions::with_tol(1e-11), &[]).unwrap();
        assert_eq!(stop, Stop::End);
        let y = tr.y.last().unwrap();
        assert!((y[0] - 10f64.sin()).abs() < 1e-9);
        assert!((y[1] - 10f64.cos()).abs() < 1e-9);
    }

    #[test]
    fn dopri_backward_and_dense_output() {
        let sys = oscillator();
        let (tr, _) = dopri45(&sys, 0.0, &[0.0, 1.0], -3.0, &AdaptiveOptions::with_tol(1e-12), &[]).unwrap();
        let mut out = [0.0; 2];
        for &t in &[-0.3, -1.7, -2.9] {
            tr.eval(t, &mut out);
            assert!((out[0] - f64::sin(t)).abs() < 1e-7, "t = {t}");
        }
    }

    #[test]
    fn event_is_located() {
        let sys = oscillator();
        let g = |y: &[f64]| y[0] - 0.5;
        let (tr, stop) = dopri45(&sys, 0.0, &[0.0, 1.0], 3.0, &AdaptiveOptions::with_tol(1e-12), &[&g]).unwrap();
        assert_eq!(stop, Stop::Event(0));
        assert!((tr.t_last() - (0.5f64).asin()).abs() < 1e-8);
    }

    #[test]
    fn rk4_fourth_order() {
        let sys = oscillator();
        let err = |n: usize| {
            let (tr, _) = rk4_fixed(&sys, 0.0, &[0.0, 1.0], 1.0 / n as f64, n, &[]).unwrap();
            (tr.y.last().unwrap()[0] - 1f64.sin()).abs()
        };
        let ratio = err(10) / err(20);
        assert!(ratio > 14.0 && ratio < 18.0, "ratio {ratio}");
    }
}
