//! Unit-speed geodesics of the collar metric, the exact conic flow, the
//! concavity coefficient of level sets and conjugate points on the link.
//!
//! Paths are integrated in the variable `σ` with `dσ = x ds`, in which the
//! state `(x, y, λ, ω)` obeys
//!
//! ```text
//! x' = xλ,  y' = ω,  λ' = −Γ⁰(X', X')/x − 2λ²,  ω' = −Γʲ(X', X') − λω,
//! ```
//!
//! with `X' = (xλ, ω)` and the normalization `λ² + g̃(X', X') = 1`. On the exact
//! cone this reduces to `λ' = −|ω|²`, `ω' = λω − Γ_link(ω, ω)`, which stays
//! regular as `x → 0`.

use std::io::Write;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{link_curvature, link_metric, metric_unchecked, Chart, Link, MetricBlocks, MetricSpec};
use crate::ode::{dopri45, AdaptiveOptions, Stop, Trajectory};

/// Index layout of the integration state.
pub const IX: usize = 0;
pub const IY1: usize = 1;
pub const IY2: usize = 2;
pub const ILAM: usize = 3;
pub const IW1: usize = 4;
pub const IW2: usize = 5;
pub const IS: usize = 6;
pub const IR: usize = 7;
pub const STATE_DIM: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeodesicState {
    pub x: f64,
    pub y: [f64; 2],
    pub lambda: f64,
    pub omega: [f64; 2],
    /// Arc length from the initial point.
    pub t: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    /// Leaves the collar through the artificial boundary `x = x0`.
    ExitsBoundary,
    /// Reached the truncation level `x_min`.
    Truncated,
    /// Integration budget or step floor hit before either event.
    Open,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathSample {
    pub state: GeodesicState,
    /// Link distance travelled from the initial point (signed).
    pub link_dist: f64,
    pub energy_drift: f64,
}

#[derive(Clone, Debug)]
pub struct GeodesicPath {
    /// Samples ordered by increasing arc length.
    pub samples: Vec<PathSample>,
    pub start: Endpoint,
    pub end: Endpoint,
    /// Index of the interior maximum of `x`, if any.
    pub tangency: Option<usize>,
    pub max_energy_drift: f64,
    /// Integration chart and the raw trajectory in `σ` (for dense output).
    pub chart: Chart,
    pub trajectory: Trajectory,
    pub init_index: usize,
}

impl GeodesicPath {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Number of interior strict local maxima of `x`.
    pub fn count_x_maxima(&self) -> usize {
        let xs: Vec<f64> = self.samples.iter().map(|s| s.state.x).collect();
        (1..xs.len().saturating_sub(1)).filter(|&k| xs[k] > xs[k - 1] && xs[k] >= xs[k + 1]).count()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t", "x", "y1", "y2", "lambda", "omega1", "omega2", "energy_drift"])
            .map_err(csv_err)?;
        for s in &self.samples {
            let st = &s.state;
            wr.write_record(&[
                fmt(st.t),
                fmt(st.x),
                fmt(st.y[0]),
                fmt(st.y[1]),
                fmt(st.lambda),
                fmt(st.omega[0]),
                fmt(st.omega[1]),
                fmt(s.energy_drift),
            ])
            .map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }
}

pub(crate) fn fmt(v: f64) -> String {
    format!("{v:.17e}")
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Right-hand side of the `σ`-system for the first six state components.
/// Returns the metric blocks so callers can reuse them.
pub fn sigma_rhs(spec: &MetricSpec, chart: &Chart, st: &[f64], d: &mut [f64]) -> Result<MetricBlocks> {
    let x = st[IX];
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Domain(format!("x = {x} left the collar")));
    }
    let m = metric_unchecked(spec, chart, x, [st[IY1], st[IY2]])?;
    let lam = st[ILAM];
    let w = [st[IW1], st[IW2]];
    let xp = [x * lam, w[0], w[1]];
    let g = m.gamma_contract(&xp, &xp);
    d[IX] = x * lam;
    d[IY1] = w[0];
    d[IY2] = w[1];
    d[ILAM] = -g[0] / x - 2.0 * lam * lam;
    d[IW1] = -g[1] - lam * w[0];
    d[IW2] = -g[2] - lam * w[1];
    Ok(m)
}

/// `λ² + g̃(X', X')`, equal to `x²|V|²_g` for `V = xλ∂x + ω∂y`.
pub fn energy(m: &MetricBlocks, lam: f64, w: [f64; 2]) -> f64 {
    let xp = Vector3::new(m.x * lam, w[0], w[1]);
    lam * lam + xp.dot(&(m.gtilde * xp))
}

fn link_speed(spec: &MetricSpec, y: [f64; 2], w: [f64; 2]) -> f64 {
    let (g0, _) = link_metric(spec.link, y);
    let v = nalgebra::Vector2::new(w[0], w[1]);
    v.dot(&(g0 * v)).max(0.0).sqrt()
}

/// Pick the integration chart for a start point given in the default chart and
/// return the start point and velocity expressed in it.
pub fn integration_chart(link: Link, y: [f64; 2], w: [f64; 2]) -> (Chart, [f64; 2], [f64; 2]) {
    match link {
        Link::Torus => (Chart::default(), y, w),
        Link::Sphere => {
            let base = Chart::default();
            let u = base.point(y);
            let v = base.ambient_velocity(y, w);
            let c = Chart::adapted(u, v);
            let yc = c.coords(u);
            let wc = c.velocity(yc, v);
            (c, yc, wc)
        }
    }
}

/// Map chart coordinates and velocity back to the default chart.
pub fn to_default_chart(link: Link, chart: &Chart, y: [f64; 2], w: [f64; 2]) -> ([f64; 2], [f64; 2]) {
    match link {
        Link::Torus => (y, w),
        Link::Sphere => {
            let u = chart.point(y);
            let v = chart.ambient_velocity(y, w);
            let base = Chart::default();
            let yb = base.coords(u);
            (yb, base.velocity(yb, v))
        }
    }
}

/// Rescale `(λ, ω)` to `λ² + g̃(X', X') = 1`; returns the scale factor used.
pub fn normalize(spec: &MetricSpec, chart: &Chart, x: f64, y: [f64; 2], lam: &mut f64, w: &mut [f64; 2]) -> Result<f64> {
    let m = metric_unchecked(spec, chart, x, y)?;
    let e = energy(&m, *lam, *w);
    if !(e > 0.0) {
        return Err(Error::Parameter("initial velocity must be nonzero".into()));
    }
    let c = e.sqrt();
    *lam /= c;
    w[0] /= c;
    w[1] /= c;
    Ok(c)
}

/// Integrate a geodesic through `init` in both directions until it leaves the
/// collar through `x = x0` or reaches `x_min`. The initial velocity is
/// renormalized to unit speed.
pub fn shoot(spec: &MetricSpec, init: &GeodesicState, tol: f64) -> Result<GeodesicPath> {
    spec.validate()?;
    if !(tol > 0.0) {
        return Err(Error::Parameter("tol must be positive".into()));
    }
    if !(init.x > spec.x_min() && init.x <= spec.x0) {
        return Err(Error::Domain(format!("initial x = {} outside (x_min, x0]", init.x)));
    }
    let (chart, yc, mut wc) = integration_chart(spec.link, init.y, init.omega);
    let mut lam = init.lambda;
    normalize(spec, &chart, init.x, yc, &mut lam, &mut wc)?;

    let y0 = [init.x, yc[0], yc[1], lam, wc[0], wc[1], 0.0, 0.0];
    let spec_c = spec.clone();
    let rhs = (STATE_DIM, move |_t: f64, st: &[f64], d: &mut [f64]| -> Result<()> {
        sigma_rhs(&spec_c, &chart, st, d)?;
        d[IS] = 1.0 / st[IX];
        d[IR] = link_speed(&spec_c, [st[IY1], st[IY2]], [st[IW1], st[IW2]]);
        Ok(())
    });
    let x0 = spec.x0;
    let xmin = spec.x_min();
    let exit = move |st: &[f64]| st[IX] - x0;
    let trunc = move |st: &[f64]| xmin - st[IX];
    let mut opts = AdaptiveOptions::with_tol(tol);
    opts.h0 = 1e-3 * init.x.min(1.0);
    opts.h_max = 0.05;
    let sigma_max = 400.0;
    let classify = |stop: Stop| match stop {
        Stop::Event(0) => Endpoint::ExitsBoundary,
        Stop::Event(_) => Endpoint::Truncated,
        _ => Endpoint::Open,
    };
    // a start exactly on x0 heading outward has already exited
    let (fwd, sf) = dopri45(&rhs, 0.0, &y0, sigma_max, &opts, &[&exit, &trunc])?;
    let (bwd, sb) = dopri45(&rhs, 0.0, &y0, -sigma_max, &opts, &[&exit, &trunc])?;
    let init_index = bwd.len() - 1;
    let traj = Trajectory::join_reverse(bwd, fwd);

    let mut samples = Vec::with_capacity(traj.len());
    let mut max_drift = 0.0f64;
    for st in &traj.y {
        let m = metric_unchecked(spec, &chart, st[IX], [st[IY1], st[IY2]])?;
        let drift = (energy(&m, st[ILAM], [st[IW1], st[IW2]]) - 1.0).abs();
        max_drift = max_drift.max(drift);
        let (yb, wb) = to_default_chart(spec.link, &chart, [st[IY1], st[IY2]], [st[IW1], st[IW2]]);
        samples.push(PathSample {
            state: GeodesicState { x: st[IX], y: yb, lambda: st[ILAM], omega: wb, t: st[IS] },
            link_dist: st[IR],
            energy_drift: drift,
        });
    }
    let xs: Vec<f64> = samples.iter().map(|s| s.state.x).collect();
    let tangency = (1..xs.len().saturating_sub(1))
        .filter(|&k| xs[k] >= xs[k - 1] && xs[k] >= xs[k + 1])
        .max_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    Ok(GeodesicPath {
        samples,
        start: classify(sb),
        end: classify(sf),
        tangency,
        max_energy_drift: max_drift,
        chart,
        trajectory: traj,
        init_index,
    })
}

/// Integrate for a fixed arc length `s_span` (signed) from `init` without
/// boundary events. Returns the final state in the default chart.
pub fn flow_for(spec: &MetricSpec, init: &GeodesicState, s_span: f64, tol: f64) -> Result<GeodesicState> {
    let (chart, yc, mut wc) = integration_chart(spec.link, init.y, init.omega);
    let mut lam = init.lambda;
    normalize(spec, &chart, init.x, yc, &mut lam, &mut wc)?;
    // use s as the independent variable: d/ds = x d/dσ
    let spec_c = spec.clone();
    let rhs = (STATE_DIM, move |_t: f64, st: &[f64], d: &mut [f64]| -> Result<()> {
        sigma_rhs(&spec_c, &chart, st, d)?;
        let x = st[IX];
        for v in d.iter_mut().take(6) {
            *v *= x;
        }
        d[IS] = 1.0;
        d[IR] = x * link_speed(&spec_c, [st[IY1], st[IY2]], [st[IW1], st[IW2]]);
        Ok(())
    });
    let y0 = [init.x, yc[0], yc[1], lam, wc[0], wc[1], init.t, 0.0];
    let mut opts = AdaptiveOptions::with_tol(tol);
    opts.h0 = 1e-4;
    let (tr, stop) = dopri45(&rhs, 0.0, &y0, s_span, &opts, &[])?;
    if stop != Stop::End {
        return Err(Error::Numerical(format!("flow stopped early: {stop:?}")));
    }
    let st = tr.y.last().unwrap();
    let (yb, wb) = to_default_chart(spec.link, &chart, [st[IY1], st[IY2]], [st[IW1], st[IW2]]);
    Ok(GeodesicState { x: st[IX], y: yb, lambda: st[ILAM], omega: wb, t: st[IS] })
}

/// Point at link distance `r` along the link geodesic from `y0` with unit
/// initial direction `mu0`; returns position and unit tangent (default chart).
pub fn link_geodesic(link: Link, y0: [f64; 2], mu0: [f64; 2], r: f64) -> ([f64; 2], [f64; 2]) {
    match link {
        Link::Torus => ([y0[0] + r * mu0[0], y0[1] + r * mu0[1]], mu0),
        Link::Sphere => {
            let c = Chart::default();
            let u0 = c.point(y0);
            let v0 = c.ambient_velocity(y0, mu0);
            let v0 = v0 / v0.norm();
            let (s, co) = r.sin_cos();
            let u = u0 * co + v0 * s;
            let v = -u0 * s + v0 * co;
            let y = c.coords(u);
            (y, c.velocity(y, v))
        }
    }
}

/// Exact bicharacteristics of the cone `dx²/x⁴ + g0/x²`:
/// `x = (x_start/sin r0) sin(r + r0)`, `τ = cos(r + r0)`, `|μ| = sin(r + r0)`.
pub fn conic_closed_form(
    x_start: f64,
    r0: f64,
    y0: [f64; 2],
    mu_hat0: [f64; 2],
    link: Link,
    r: f64,
) -> Result<GeodesicState> {
    use std::f64::consts::PI;
    if !(r0 > 0.0 && r0 < PI) {
        return Err(Error::Domain(format!("r0 = {r0} outside (0, π)")));
    }
    if !(r > -r0 && r < PI - r0) {
        return Err(Error::Domain(format!("r = {r} outside (−r0, π − r0)")));
    }
    let phase = r + r0;
    let x = x_start / r0.sin() * phase.sin();
    let (y, mu) = link_geodesic(link, y0, mu_hat0, r);
    let amp = phase.sin();
    Ok(GeodesicState { x, y, lambda: phase.cos(), omega: [amp * mu[0], amp * mu[1]], t: f64::NAN })
}

/// Result of the least-squares concavity fit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcavityFit {
    pub alpha: f64,
    /// Relative RMS misfit of the quadratic-plus-cubic model.
    pub residual: f64,
    /// `−Γ⁰(V, V)/(2x)` evaluated directly.
    pub alpha_analytic: f64,
    pub reliable: bool,
}

pub const CONCAVITY_RESIDUAL_LIMIT: f64 = 1e-3;

/// Fit `x(t)/x − 1 − λt ≈ αt² + βt³ + γt⁴` over `|t| ≤ 0.1x`, where `t` is the affine
/// parameter with `γ'(0) = V = xλ∂x + ω∂y` and `(λ, ω)` normalized so that
/// `|V|_g = 1/x`.
pub fn concavity_alpha(spec: &MetricSpec, x: f64, y: [f64; 2], lambda: f64, omega: [f64; 2]) -> Result<ConcavityFit> {
    if !(x > 0.0 && x < spec.x0) {
        return Err(Error::Domain(format!("x = {x} outside (0, x0)")));
    }
    let (chart, yc, mut wc) = integration_chart(spec.link, y, omega);
    let mut lam = lambda;
    normalize(spec, &chart, x, yc, &mut lam, &mut wc)?;
    let m = metric_unchecked(spec, &chart, x, yc)?;
    let v = [x * lam, wc[0], wc[1]];
    let alpha_analytic = -m.gamma_contract(&v, &v)[0] / (2.0 * x);

    // independent variable t: d/dt = (x/x_start) d/dσ; track u = ln(x/x_start)
    // so the small quantity x/x_start − 1 keeps full relative precision
    let xs = x;
    let spec_c = spec.clone();
    let rhs = (7usize, move |_t: f64, st: &[f64], d: &mut [f64]| -> Result<()> {
        let xx = xs * st[6].exp();
        let mut s = [xx, st[1], st[2], st[3], st[4], st[5]];
        s[0] = xx;
        let mut dd = [0.0; 6];
        sigma_rhs(&spec_c, &chart, &s, &mut dd)?;
        let k = xx / xs;
        d[0] = 0.0;
        for i in 1..6 {
            d[i] = dd[i] * k;
        }
        d[6] = st[3] * k;
        Ok(())
    });
    let tmax = 0.1 * x;
    let y0 = [x, yc[0], yc[1], lam, wc[0], wc[1], 0.0];
    let mut opts = AdaptiveOptions::with_tol(1e-14);
    opts.atol = 1e-16;
    opts.h0 = tmax * 1e-3;
    let (fwd, _) = dopri45(&rhs, 0.0, &y0, tmax, &opts, &[])?;
    let (bwd, _) = dopri45(&rhs, 0.0, &y0, -tmax, &opts, &[])?;
    let n = 41;
    // the quartic column absorbs the next Taylor term so α is not biased by it
    let mut a = DMatrix::zeros(n, 3);
    let mut b = DVector::zeros(n);
    let mut buf = [0.0; 7];
    let mut maxabs = 0.0f64;
    for k in 0..n {
        let t = -tmax + 2.0 * tmax * k as f64 / (n - 1) as f64;
        if t >= 0.0 {
            fwd.eval(t, &mut buf);
        } else {
            bwd.eval(t, &mut buf);
        }
        let val = buf[6].exp_m1() - lam * t;
        a[(k, 0)] = t * t;
        a[(k, 1)] = t * t * t;
        a[(k, 2)] = t * t * t * t;
        b[k] = val;
        maxabs = maxabs.max(val.abs());
    }
    let svd = a.clone().svd(true, true);
    let coef = svd.solve(&b, 1e-300).map_err(|e| Error::Numerical(e.to_string()))?;
    let fit = &a * &coef;
    let rms = ((&fit - &b).norm_squared() / n as f64).sqrt();
    let residual = if maxabs > 0.0 { rms / maxabs } else { 0.0 };
    Ok(ConcavityFit { alpha: coef[0], residual, alpha_analytic, reliable: residual < CONCAVITY_RESIDUAL_LIMIT })
}

/// Least-squares recovery of `α` from samples of `f(t) ≈ αt² + βt³`.
pub fn fit_quadratic_cubic(ts: &[f64], fs: &[f64]) -> Result<(f64, f64)> {
    let n = ts.len();
    let a = DMatrix::from_fn(n, 2, |i, j| ts[i].powi(2 + j as i32));
    let b = DVector::from_column_slice(fs);
    let c = a.svd(true, true).solve(&b, 1e-300).map_err(|e| Error::Numerical(e.to_string()))?;
    Ok((c[0], c[1]))
}

/// First zero of the Jacobi field `J'' + K J = 0`, `J(0) = 0`, `J'(0) = 1`
/// along the unit-speed link geodesic from `y0` in direction `mu0`.
pub fn conjugate_scan(link: Link, y0: [f64; 2], mu0: [f64; 2], max_dist: f64) -> Result<Option<f64>> {
    use std::f64::consts::PI;
    if !(max_dist > 0.0) || max_dist > PI + 1e-12 {
        return Err(Error::Parameter(format!("max_dist = {max_dist} must lie in (0, π]")));
    }
    let (chart, yc, mut wc) = integration_chart(link, y0, mu0);
    let (g0, _) = link_metric(link, yc);
    let v = nalgebra::Vector2::new(wc[0], wc[1]);
    let sp = v.dot(&(g0 * v)).sqrt();
    if !(sp > 0.0) {
        return Err(Error::Parameter("direction must be nonzero".into()));
    }
    wc = [wc[0] / sp, wc[1] / sp];
    let _ = chart;
    let rhs = (6usize, move |_t: f64, st: &[f64], d: &mut [f64]| -> Result<()> {
        let y = [st[0], st[1]];
        let (g, dg) = link_metric(link, y);
        let gi = g.try_inverse().ok_or_else(|| Error::DegenerateMetric("link chart singular".into()))?;
        let w = [st[2], st[3]];
        let mut gam = [0.0; 2];
        for (l, gl) in gam.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..2 {
                for k in 0..2 {
                    let mut c = 0.0;
                    for r in 0..2 {
                        c += gi[(l, r)] * (dg[k][(r, j)] + dg[j][(r, k)] - dg[r][(j, k)]);
                    }
                    acc += 0.5 * c * w[j] * w[k];
                }
            }
            *gl = acc;
        }
        d[0] = w[0];
        d[1] = w[1];
        d[2] = -gam[0];
        d[3] = -gam[1];
        d[4] = st[5];
        d[5] = -link_curvature(link, y) * st[4];
        Ok(())
    });
    let y0s = [yc[0], yc[1], wc[0], wc[1], 0.0, 1.0];
    let mut opts = AdaptiveOptions::with_tol(1e-13);
    opts.h0 = 1e-3;
    opts.h_max = 0.05;
    let span = max_dist + 1e-2;
    let (tr, _) = dopri45(&rhs, 0.0, &y0s, span, &opts, &[])?;
    let mut buf = [0.0; 6];
    for k in 1..tr.len() {
        let (j0, j1) = (tr.y[k - 1][4], tr.y[k][4]);
        if tr.t[k - 1] > 0.0 && j0 > 0.0 && j1 <= 0.0 {
            let (mut a, mut b) = (tr.t[k - 1], tr.t[k]);
            for _ in 0..100 {
                let m = 0.5 * (a + b);
                tr.eval(m, &mut buf);
                if buf[4] > 0.0 {
                    a = m;
                } else {
                    b = m;
                }
            }
            let root = 0.5 * (a + b);
            return Ok(if root <= max_dist + 1e-9 { Some(root) } else { None });
        }
    }
    Ok(None)
}

/// One random conic initialization compared against the exact flow.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeComparison {
    pub index: usize,
    pub x_peak: f64,
    pub r0: f64,
    pub y0: [f64; 2],
    pub mu0: [f64; 2],
    /// Sup over the compared samples of `|x − x_exact|` and `|λ − λ_exact|`.
    pub max_error: f64,
    pub max_energy_drift: f64,
    /// Compared samples and the covered range of `r + r0`.
    pub samples: usize,
    pub phase_range: [f64; 2],
}

/// Random initialization `(x, y, λ, ω) = (x_peak sin r0, y0, cos r0, sin r0·μ0)`
/// of a conic geodesic with top `x_peak`, `μ0` unit for the link metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConicInit {
    pub x_peak: f64,
    pub r0: f64,
    pub y0: [f64; 2],
    pub mu0: [f64; 2],
}

impl ConicInit {
    pub fn state(&self) -> GeodesicState {
        let s = self.r0.sin();
        GeodesicState {
            x: self.x_peak * s,
            y: self.y0,
            lambda: self.r0.cos(),
            omega: [s * self.mu0[0], s * self.mu0[1]],
            t: 0.0,
        }
    }
}

pub fn random_conic_inits(link: Link, x0: f64, n: usize, seed: u64) -> Vec<ConicInit> {
    use rand::{Rng, SeedableRng};
    use std::f64::consts::{PI, TAU};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x_peak = x0 * rng.random_range(0.2..0.9);
            let r0 = rng.random_range(0.3..PI - 0.3);
            let y0 = match link {
                Link::Torus => [rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)],
                Link::Sphere => [rng.random_range(0.4..PI - 0.4), rng.random_range(0.0..TAU)],
            };
            let a = rng.random_range(0.0..TAU);
            let (g, _) = link_metric(link, y0);
            let mu0 = [a.cos() / g[(0, 0)].sqrt(), a.sin() / g[(1, 1)].sqrt()];
            ConicInit { x_peak, r0, y0, mu0 }
        })
        .collect()
}

/// Integrate `n` random initializations on the exact cone with `shoot` and
/// compare against `conic_closed_form` for `r ∈ (−r0 + margin, π − r0 − margin)`.
pub fn cone_comparison(spec: &MetricSpec, n: usize, seed: u64, tol: f64, margin: f64) -> Result<Vec<ConeComparison>> {
    use std::f64::consts::PI;
    if !spec.perturbation.is_empty() {
        return Err(Error::Precondition("closed form only holds on the exact cone".into()));
    }
    if !(margin > 0.0 && margin < 0.5) {
        return Err(Error::Parameter(format!("margin = {margin} must lie in (0, 0.5)")));
    }
    random_conic_inits(spec.link, spec.x0, n, seed)
        .iter()
        .enumerate()
        .map(|(index, c)| {
            let init = c.state();
            let p = shoot(spec, &init, tol)?;
            let mut max_error = 0.0f64;
            let mut count = 0;
            let mut range = [f64::INFINITY, f64::NEG_INFINITY];
            for s in &p.samples {
                let r = s.link_dist;
                if r > -c.r0 + margin && r < PI - c.r0 - margin {
                    let e = conic_closed_form(init.x, c.r0, c.y0, c.mu0, spec.link, r)?;
                    max_error = max_error.max((e.x - s.state.x).abs()).max((e.lambda - s.state.lambda).abs());
                    count += 1;
                    range = [range[0].min(r + c.r0), range[1].max(r + c.r0)];
                }
            }
            Ok(ConeComparison {
                index,
                x_peak: c.x_peak,
                r0: c.r0,
                y0: c.y0,
                mu0: c.mu0,
                max_error,
                max_energy_drift: p.max_energy_drift,
                samples: count,
                phase_range: range,
            })
        })
        .collect()
}

/// CSV with one row per initialization.
pub fn write_comparison_csv<W: Write>(rows: &[ConeComparison], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["index", "x_peak", "r0", "y1", "y2", "mu1", "mu2", "samples", "phase_lo", "phase_hi", "energy_drift", "max_error"])
        .map_err(csv_err)?;
    for r in rows {
        let mut row = vec![r.index.to_string()];
        row.extend([r.x_peak, r.r0, r.y0[0], r.y0[1], r.mu0[0], r.mu0[1]].iter().map(|&v| fmt(v)));
        row.push(r.samples.to_string());
        row.extend([r.phase_range[0], r.phase_range[1], r.max_energy_drift, r.max_error].iter().map(|&v| fmt(v)));
        wr.write_record(&row).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}
