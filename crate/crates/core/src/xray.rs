//! Geodesic fans, the X-ray transform along paths, the cutoff backprojection
//! and the conjugated normal operator `N = e^{−FΦ/h} L χ̃ I e^{FΦ/h}`.
//!
//! A fan at a base point `z` samples directions by a Gauss–Hermite rule in the
//! rescaled radial velocity `λ̂` (matched to the Gaussian cutoff) times a
//! uniform rule in the link direction `ω̂`. Each fan geodesic is integrated in
//! `σ` (`dσ = x ds`) and reduced to quadrature points carrying the fused
//! exponent `F(Φ(γ) − Φ(z))/h + ln χ̃(λ̂)`, so no unbounded weight is ever
//! formed.
//!
//! Normalization: with `V = xλ∂x + ω∂y` and unit-speed `γ̇ = xV`,
//!
//! ```text
//! (N f)(z) = P_m(z) ∫ χ̃(λ̂) [∫ e^{F(Φ(γ)−Φ(z))/h} f(γ̇^{⊗m}) ds] g_h(V(0))^{⊗m} dλ dω̂
//! ```
//!
//! where `dλ dω̂` is the unit-sphere measure, `g_h` the frame metric and
//! `P_0 = x²w_x`, `P_1 = x²c`, `P_2 = hx⁴c` with `c = w_x/(x w_y²)`.

use std::collections::HashMap;
use std::f64::consts::{PI, TAU};
use std::io::{Read, Write};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sprs::{CsMat, TriMat};

use crate::error::{Error, Result};
use crate::field::{frame_to_coord, ncomp, phi_deriv, phi_unchecked, slot_weight, Grid, TensorField, OVERFLOW_EXPONENT, PAIRS};
use crate::geodesic::{normalize, sigma_rhs, GeodesicPath, ILAM, IW1, IW2, IX, IY1, IY2};
use crate::geometry::{frame_weights_unchecked, smoothstep, metric_unchecked, Chart, FrameWeights, Link, MetricSpec};
use crate::ode::{dopri45, rk4_fixed, AdaptiveOptions, Stop, Trajectory};
use crate::quadrature::{hermite, legendre, Rule};

/// Paths are cut once the fused exponent drops below this value.
pub const NEGLIGIBLE_EXPONENT: f64 = -40.0;

/// The quadratic damping model bounds the peak of `F(Φ(γ) − Φ(z))/h` along a
/// fan geodesic by `u² = −ln χ̃/2`. Directions exceeding that bound by more
/// than `TAPER.0` are faded out, reaching zero at `TAPER.1`; this only removes
/// geodesics that climb far towards `x0`, and keeps every fused exponent
/// below `TAPER.1`.
pub const TAPER: (f64, f64) = (2.0, 4.0);

/// How fan geodesics are integrated and reduced to quadrature points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    /// Fixed-step RK4 with 4-point Gauss–Legendre per step.
    Matrix,
    /// Adaptive Dormand–Prince with 6-point Gauss–Legendre per step.
    Path,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FanOptions {
    pub n_lambda: usize,
    pub n_omega: usize,
    pub route: Route,
    /// Step in rescaled time `t̂`, in units of `(F|α|)^{−1/2}`.
    pub step: f64,
    pub tol: f64,
}

impl FanOptions {
    pub fn matrix() -> Self {
        FanOptions { n_lambda: 16, n_omega: 32, route: Route::Matrix, step: 0.25, tol: 1e-10 }
    }

    pub fn path() -> Self {
        FanOptions { n_lambda: 16, n_omega: 32, route: Route::Path, step: 0.5, tol: 1e-10 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FanDirection {
    /// Gauss–Hermite node; `λ̂ = 2|ν|^{1/2} u`.
    pub u: f64,
    pub lambda_hat: f64,
    /// Initial `(λ, ω)` after unit-speed normalization.
    pub lambda: f64,
    pub omega: [f64; 2],
    pub alpha: f64,
    pub nu: f64,
    /// Plain quadrature weight for `dλ dω̂`.
    pub weight: f64,
    /// Cutoff actually applied: the Gaussian times the [`TAPER`] factor.
    pub log_chi: f64,
    pub log_chi_gaussian: f64,
}

/// Quadrature point on a fan path; `w` is the `dσ` weight and `expo` the
/// fused exponent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadPoint {
    pub x: f64,
    pub y: [f64; 2],
    pub v: [f64; 3],
    pub w: f64,
    pub expo: f64,
}

#[derive(Clone, Debug)]
pub struct GeodesicFan {
    pub x: f64,
    pub y: [f64; 2],
    pub f: f64,
    pub h: f64,
    pub frame: FrameWeights,
    pub directions: Vec<FanDirection>,
    pub paths: Vec<Vec<QuadPoint>>,
    pub max_exponent: f64,
    /// `∫ χ̃ dλ dω̂` over the whole sphere, before the taper.
    pub gaussian_mass: f64,
}

impl GeodesicFan {
    /// `Σ_k weight_k χ̃(λ̂_k)`, equal to `∫ χ̃ dλ dω̂`.
    pub fn cutoff_mass(&self) -> f64 {
        self.directions.iter().map(|d| d.weight * d.log_chi.exp()).sum()
    }

    /// Fraction of the cutoff mass carried by directions with `|λ̂| > k|ν|^{1/2}`.
    pub fn cutoff_tail(&self, k: f64) -> f64 {
        let tail: f64 = self
            .directions
            .iter()
            .filter(|d| d.lambda_hat.abs() > k * d.nu.abs().sqrt())
            .map(|d| d.weight * d.log_chi.exp())
            .sum();
        tail / self.cutoff_mass()
    }

    /// Fraction of the sphere's Gaussian cutoff mass that the fan does not
    /// carry (removed by the taper).
    pub fn capped_fraction(&self) -> f64 {
        (1.0 - self.cutoff_mass() / self.gaussian_mass).max(0.0)
    }

    pub fn points(&self) -> usize {
        self.paths.iter().map(|p| p.len()).sum()
    }
}

/// `α` of the cutoff at `(z, ω̂)`: the `σ`-concavity `−Γ⁰(V, V)/(2x)` rescaled
/// by `Φ′x/(h w_y²)` (equal to `1` in the 1c regime and `x` in the sc regime).
pub fn fan_alpha(spec: &MetricSpec, x: f64, y: [f64; 2], omega_hat: [f64; 2], h: f64) -> Result<f64> {
    let chart = Chart::default();
    let mut lam = 0.0;
    let mut w = omega_hat;
    normalize(spec, &chart, x, y, &mut lam, &mut w)?;
    let m = metric_unchecked(spec, &chart, x, y)?;
    let v = [0.0, w[0], w[1]];
    let a_sigma = -m.gamma_contract(&v, &v)[0] / (2.0 * x);
    let fw = frame_weights_unchecked(spec.x0, spec.p_exponent, x, h);
    Ok(a_sigma * phi_deriv(x, spec.x0)? * x / (h * fw.wy * fw.wy))
}

/// `∫_{−1}^{1} e^{λ²/(2ν dl²)} dλ`: analytic when the profile fits, else
/// composite Gauss–Legendre.
fn gaussian_mass_in_unit_interval(nu: f64, dl: f64) -> f64 {
    let sd = nu.abs().sqrt() * dl;
    if sd < 0.1 {
        return (TAU * nu.abs()).sqrt() * dl;
    }
    let r = legendre(16);
    (0..8)
        .map(|p| {
            let a = -1.0 + 0.25 * p as f64;
            crate::quadrature::integrate_legendre(&r, a, a + 0.25, |l| (-l * l / (2.0 * sd * sd)).exp())
        })
        .sum()
}

fn check_fan_args(spec: &MetricSpec, f: f64, h: f64) -> Result<()> {
    spec.validate()?;
    if spec.link != Link::Torus {
        return Err(Error::Unsupported("fans are built on torus links only".into()));
    }
    if !(f > 0.0) {
        return Err(Error::Parameter(format!("F = {f} must be positive")));
    }
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("h = {h} must be positive")));
    }
    Ok(())
}

/// Build the fan at `(x, y)`; paths are cut where they leave `(x_lo, x_hi)`
/// or where the fused exponent becomes negligible.
pub fn build_fan(
    spec: &MetricSpec,
    support: (f64, f64),
    x: f64,
    y: [f64; 2],
    f: f64,
    h: f64,
    opts: &FanOptions,
) -> Result<GeodesicFan> {
    check_fan_args(spec, f, h)?;
    let (x_lo, x_hi) = support;
    if !(x > x_lo && x < x_hi && x_hi <= spec.x0) {
        return Err(Error::Domain(format!("base x = {x} outside ({x_lo}, {x_hi})")));
    }
    let fw = frame_weights_unchecked(spec.x0, spec.p_exponent, x, h);
    let dl = fw.wy / (x * fw.wx);
    let gh = hermite(opts.n_lambda);
    let gl = legendre(opts.n_lambda);
    let u_max = gh.nodes.iter().fold(0.0f64, |m, u| m.max(u.abs()));
    let phi_z = phi_unchecked(x, spec.x0);
    let rule = legendre(if opts.route == Route::Matrix { 4 } else { 6 });
    let dw = TAU / opts.n_omega as f64;
    let mut dirs = Vec::new();
    let mut out = Vec::new();
    let mut gaussian_mass = 0.0;
    let mut max_e = f64::NEG_INFINITY;
    for k in 0..opts.n_omega {
        let th = TAU * k as f64 / opts.n_omega as f64;
        let om = [th.cos(), th.sin()];
        let alpha = fan_alpha(spec, x, y, om, h)?;
        if !(alpha < 0.0) {
            return Err(Error::Precondition(format!("α = {alpha} ≥ 0 at x = {x}, ω = {om:?}")));
        }
        let nu = alpha / f;
        let s = 2.0 * nu.abs().sqrt();
        gaussian_mass += dw * gaussian_mass_in_unit_interval(nu, dl);
        // Legendre on [−Λ, Λ] while the profile is wider than the sphere,
        // shrinking Λ while the outermost directions are fully tapered out;
        // Hermite once the profile fits, unless its outer nodes are tapered
        // out too (the quadratic model is too wide there).
        let mut span: f64 = 1.0;
        let mut legendre_only = false;
        loop {
            let hermite_fits = !legendre_only && s * u_max * dl < span.min(0.999);
            let nodes: Vec<(f64, f64)> = if hermite_fits {
                gh.nodes.iter().zip(&gh.weights).map(|(u, w)| (s * u * dl, dw * w * (u * u).exp() * s * dl)).collect()
            } else {
                gl.nodes.iter().zip(&gl.weights).map(|(t, w)| (span * t, dw * span * w)).collect()
            };
            let mut batch = Vec::with_capacity(nodes.len());
            for (lam0, weight) in nodes {
                let lh = lam0 / dl;
                let mut lam = lam0;
                let c = (1.0 - lam0 * lam0).sqrt();
                let mut wv = [om[0] * c, om[1] * c];
                normalize(spec, &Chart::default(), x, y, &mut lam, &mut wv)?;
                let log_chi = lh * lh / (2.0 * nu);
                let mut d = FanDirection {
                    u: lh / s,
                    lambda_hat: lh,
                    lambda: lam,
                    omega: wv,
                    alpha,
                    nu,
                    weight,
                    log_chi,
                    log_chi_gaussian: log_chi,
                };
                let (mut pts, rise) = trace(spec, support, x, y, phi_z, f, h, fw.wy, &d, opts, &rule)?;
                // excess of the peak damping over the quadratic model −u²
                let t = (rise + 0.5 * d.log_chi - TAPER.0) / (TAPER.1 - TAPER.0);
                if t >= 1.0 {
                    d.log_chi = f64::NEG_INFINITY;
                    pts.clear();
                } else if t > 0.0 {
                    d.log_chi += (1.0 - smoothstep(t)).ln();
                }
                pts.retain_mut(|q| {
                    q.expo += d.log_chi;
                    q.expo >= NEGLIGIBLE_EXPONENT - 10.0
                });
                batch.push((d, pts));
            }
            let outer_dead = batch.first().is_some_and(|b| b.0.log_chi == f64::NEG_INFINITY)
                && batch.last().is_some_and(|b| b.0.log_chi == f64::NEG_INFINITY);
            if hermite_fits && outer_dead {
                legendre_only = true;
                span = span.min(s * u_max * dl);
                continue;
            }
            if hermite_fits || !outer_dead || span < 1e-3 {
                for (d, pts) in batch {
                    for q in &pts {
                        max_e = max_e.max(q.expo);
                    }
                    dirs.push(d);
                    out.push(pts);
                }
                break;
            }
            span *= 0.6;
        }
    }
    if max_e > OVERFLOW_EXPONENT {
        return Err(Error::Overflow { exponent: max_e, limit: OVERFLOW_EXPONENT });
    }
    Ok(GeodesicFan { x, y, f, h, frame: fw, directions: dirs, paths: out, max_exponent: max_e, gaussian_mass })
}

/// Traces both halves of a fan geodesic; point exponents exclude the cutoff.
/// Returns the points and the largest `F(Φ(γ) − Φ(z))/h` seen.
#[allow(clippy::too_many_arguments)]
fn trace(
    spec: &MetricSpec,
    (x_lo, x_hi): (f64, f64),
    x: f64,
    y: [f64; 2],
    phi_z: f64,
    f: f64,
    h: f64,
    wy: f64,
    d: &FanDirection,
    opts: &FanOptions,
    rule: &Rule,
) -> Result<(Vec<QuadPoint>, f64)> {
    let x0 = spec.x0;
    let log_chi = d.log_chi;
    let rise = move |xx: f64| f * (phi_unchecked(xx, x0) - phi_z) / h;
    let chart = Chart::default();
    let sp = spec.clone();
    let rhs = (6usize, move |_t: f64, st: &[f64], dd: &mut [f64]| -> Result<()> {
        sigma_rhs(&sp, &chart, st, dd)?;
        Ok(())
    });
    let y0 = [x, y[0], y[1], d.lambda, d.omega[0], d.omega[1]];
    let dsig = (opts.step / (wy * (f * d.alpha.abs()).sqrt())).min(0.05);
    let sigma_max = 50.0;
    let mut pts = Vec::new();
    let mut max_rise = 0.0f64;
    for dir in [1.0, -1.0] {
        // x has at most one interior maximum, so once descending with a
        // negligible exponent the rest of the path is negligible too
        let ev_small = move |st: &[f64]| (NEGLIGIBLE_EXPONENT - rise(st[IX]) - log_chi).min(-dir * st[ILAM]);
        if ev_small(&y0) >= 0.0 {
            continue;
        }
        let ev_exit = move |st: &[f64]| st[IX] - x_hi;
        let ev_low = move |st: &[f64]| x_lo - st[IX];
        let events: [&dyn Fn(&[f64]) -> f64; 3] = [&ev_exit, &ev_low, &ev_small];
        let (tr, stop) = match opts.route {
            Route::Matrix => {
                let steps = (sigma_max / dsig).ceil() as usize;
                rk4_fixed(&rhs, 0.0, &y0, dir * dsig, steps, &events)?
            }
            Route::Path => {
                let mut o = AdaptiveOptions::with_tol(opts.tol);
                o.h0 = 0.25 * dsig;
                o.h_max = dsig;
                dopri45(&rhs, 0.0, &y0, dir * sigma_max, &o, &events)?
            }
        };
        // a path leaving through x_hi has seen the weight there
        if stop == Stop::Event(0) {
            max_rise = max_rise.max(rise(x_hi.min(x0)));
        }
        collect_points(&tr, rule, x_lo, x_hi, &rise, &mut pts, &mut max_rise);
    }
    Ok((pts, max_rise))
}

fn collect_points(
    tr: &Trajectory,
    rule: &Rule,
    x_lo: f64,
    x_hi: f64,
    rise: &dyn Fn(f64) -> f64,
    pts: &mut Vec<QuadPoint>,
    max_rise: &mut f64,
) {
    let mut st = [0.0; 6];
    for s in 0..tr.len().saturating_sub(1) {
        let (a, b) = (tr.t[s], tr.t[s + 1]);
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        for (g, gw) in rule.nodes.iter().zip(&rule.weights) {
            tr.eval(mid + half * g, &mut st);
            let xx = st[IX];
            if !(xx > x_lo && xx < x_hi) {
                continue;
            }
            let e = rise(xx);
            *max_rise = max_rise.max(e);
            pts.push(QuadPoint {
                x: xx,
                y: [st[IY1], st[IY2]],
                v: [xx * st[ILAM], st[IW1], st[IW2]],
                w: gw * half.abs(),
                expo: e,
            });
        }
    }
}

/// Frame components of `g_h(V)^{⊗m}` for `V = (xλ, ω)` at the base.
pub fn base_tensor(rank: usize, fw: &FrameWeights, x: f64, d: &FanDirection, out: &mut [f64]) {
    let u = [fw.wx * x * d.lambda, fw.wy * d.omega[0], fw.wy * d.omega[1]];
    match rank {
        0 => out[0] = 1.0,
        1 => out[..3].copy_from_slice(&u),
        _ => {
            for (c, &(a, b)) in PAIRS.iter().enumerate() {
                out[c] = u[a] * u[b];
            }
        }
    }
}

/// Backprojection prefactor `P_m` at the base.
pub fn prefactor(rank: usize, fw: &FrameWeights, x: f64, h: f64) -> f64 {
    let c = fw.wx / (x * fw.wy * fw.wy);
    match rank {
        0 => x * x * fw.wx,
        1 => x * x * c,
        _ => h * x.powi(4) * c,
    }
}

/// Coefficients turning interpolated frame components into `x^{m−1} f(V^{⊗m})`
/// at a path point, i.e. the `ds`-integrand of the unit-speed transform per `dσ`.
fn pairing_coef(rank: usize, grid: &Grid, h: f64, q: &QuadPoint, out: &mut [f64]) {
    let fw = grid.frame(q.x, h);
    let nc = ncomp(rank);
    let ones = [1.0; 6];
    let mut wts = [0.0; 6];
    frame_to_coord(rank, &fw, &ones, &mut wts);
    let xm = q.x.powi(rank as i32 - 1);
    let v = q.v;
    for c in 0..nc {
        let vv = match rank {
            0 => 1.0,
            1 => v[c],
            _ => {
                let (a, b) = PAIRS[c];
                slot_weight(2, c) * v[a] * v[b]
            }
        };
        out[c] = xm * wts[c] * vv;
    }
}

/// Damped transforms of `field` along every fan path, with the fan shifted
/// by `shift` in `y`: `χ̃(λ̂)·e^{−FΦ(z)/h}·I(e^{FΦ/h} f)` in fused form.
pub fn damped_transforms(field: &TensorField, fan: &GeodesicFan, shift: [f64; 2]) -> Vec<f64> {
    let nc = field.ncomp();
    let mut coef = [0.0; 6];
    let mut comps = [0.0; 6];
    fan.paths
        .iter()
        .map(|pts| {
            let mut acc = 0.0;
            for q in pts {
                field.interp(q.x, [q.y[0] + shift[0], q.y[1] + shift[1]], &mut comps);
                if comps[..nc].iter().all(|&c| c == 0.0) {
                    continue;
                }
                pairing_coef(field.rank, &field.grid, field.h, q, &mut coef);
                let mut s = 0.0;
                for c in 0..nc {
                    s += coef[c] * comps[c];
                }
                acc += q.w * q.expo.exp() * s;
            }
            acc
        })
        .collect()
}

/// `P_m Σ_k w_k g_h(V_k(0))^{⊗m} values_k`.
pub fn backproject(values: &[f64], fan: &GeodesicFan, rank: usize) -> Result<Vec<f64>> {
    if values.len() != fan.directions.len() {
        return Err(Error::Shape(format!("{} values for {} fan directions", values.len(), fan.directions.len())));
    }
    if rank > 2 {
        return Err(Error::Unsupported(format!("rank {rank}")));
    }
    let nc = ncomp(rank);
    let p = prefactor(rank, &fan.frame, fan.x, fan.h);
    let mut out = vec![0.0; nc];
    let mut u = [0.0; 6];
    for (d, v) in fan.directions.iter().zip(values) {
        base_tensor(rank, &fan.frame, fan.x, d, &mut u);
        for c in 0..nc {
            out[c] += p * d.weight * v * u[c];
        }
    }
    Ok(out)
}

/// Unit-speed X-ray transform `∫ f(γ̇^{⊗m}) ds` of a grid field along a path,
/// with 6-point Gauss–Legendre on every integrator step.
pub fn transform_one(field: &TensorField, path: &GeodesicPath) -> Result<f64> {
    let grid = field.grid.clone();
    if grid.link != Link::Torus {
        return Err(Error::Unsupported("grid fields live on the torus".into()));
    }
    let h = field.h;
    transform_with(path, field.rank, |x, y, v| {
        let mut comps = [0.0; 6];
        field.interp(x, y, &mut comps);
        let fw = grid.frame(x, h);
        let mut coord = [0.0; 6];
        frame_to_coord(field.rank, &fw, &comps, &mut coord);
        Ok(crate::field::contract(field.rank, &coord, &v))
    })
}

/// Transform of an arbitrary integrand `f(x, y, V) = f(V^{⊗m})` (coordinate
/// pairing with `V = xλ∂x + ω∂y`, default chart) along a path.
pub fn transform_with<F>(path: &GeodesicPath, rank: usize, f: F) -> Result<f64>
where
    F: Fn(f64, [f64; 2], [f64; 3]) -> Result<f64>,
{
    let tr = &path.trajectory;
    let rule = legendre(6);
    let mut st = vec![0.0; tr.y.first().map_or(0, |v| v.len())];
    let mut acc = 0.0;
    let link = match path.samples.first() {
        Some(_) => {
            if path.chart == Chart::default() {
                None
            } else {
                Some(path.chart)
            }
        }
        None => return Ok(0.0),
    };
    for s in 0..tr.len().saturating_sub(1) {
        let (a, b) = (tr.t[s], tr.t[s + 1]);
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        for (g, gw) in rule.nodes.iter().zip(&rule.weights) {
            tr.eval(mid + half * g, &mut st);
            let x = st[IX];
            let (y, w) = match link {
                None => ([st[IY1], st[IY2]], [st[IW1], st[IW2]]),
                Some(c) => crate::geodesic::to_default_chart(Link::Sphere, &c, [st[IY1], st[IY2]], [st[IW1], st[IW2]]),
            };
            let v = [x * st[ILAM], w[0], w[1]];
            acc += gw * half * x.powi(rank as i32 - 1) * f(x, y, v)?;
        }
    }
    Ok(acc)
}

/// Statistics of an assembly.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct FanStats {
    pub fans: usize,
    pub paths: usize,
    pub points: usize,
    pub max_exponent: f64,
    pub max_cutoff_tail: f64,
    /// Largest fraction of a fan's Gaussian cutoff mass removed by the taper.
    pub max_capped_fraction: f64,
}

impl FanStats {
    pub fn of(fan: &GeodesicFan) -> FanStats {
        FanStats {
            fans: 1,
            paths: fan.paths.len(),
            points: fan.points(),
            max_exponent: fan.max_exponent,
            max_cutoff_tail: fan.cutoff_tail(6.0),
            max_capped_fraction: fan.capped_fraction(),
        }
    }

    pub fn merge(&mut self, o: &FanStats) {
        self.fans += o.fans;
        self.paths += o.paths;
        self.points += o.points;
        self.max_exponent = self.max_exponent.max(o.max_exponent);
        self.max_cutoff_tail = self.max_cutoff_tail.max(o.max_cutoff_tail);
        self.max_capped_fraction = self.max_capped_fraction.max(o.max_capped_fraction);
    }

    fn empty() -> FanStats {
        FanStats { max_exponent: f64::NEG_INFINITY, ..Default::default() }
    }
}

/// The assembled conjugated normal operator on weighted frame components.
#[derive(Clone, Debug)]
pub struct NormalOperator {
    pub grid: Arc<Grid>,
    pub rank: usize,
    pub f: f64,
    pub h: f64,
    /// Rows and columns indexed `node·ncomp + component`.
    pub matrix: CsMat<f64>,
    pub stats: FanStats,
}

fn check_grid(spec: &MetricSpec, grid: &Grid) -> Result<()> {
    if (grid.x0 - spec.x0).abs() > 1e-15 || (grid.p - spec.p_exponent).abs() > 1e-15 {
        return Err(Error::Shape("grid and metric disagree on x0 or p".into()));
    }
    if grid.link != spec.link {
        return Err(Error::Shape("grid and metric disagree on the link".into()));
    }
    Ok(())
}

/// Fan at grid node `n`; the path support is the grid's `(x_lo, x_hi)`.
pub fn fan_at(spec: &MetricSpec, grid: &Grid, n: usize, f: f64, h: f64, opts: &FanOptions) -> Result<GeodesicFan> {
    let (x, y) = grid.node(n);
    build_fan(spec, (grid.x_lo(), grid.x_hi().min(spec.x0)), x, y, f, h, opts)
}

/// Sparse row of `N` at the fan's base: `(column, out component, value)` with
/// columns `node·ncomp + component` of the unshifted fan.
fn fan_row(grid: &Grid, fan: &GeodesicFan, rank: usize) -> HashMap<(usize, usize), Vec<f64>> {
    let nc = ncomp(rank);
    let p = prefactor(rank, &fan.frame, fan.x, fan.h);
    let mut row: HashMap<(usize, usize), Vec<f64>> = HashMap::new();
    let mut u = [0.0; 6];
    let mut coef = [0.0; 6];
    for (d, pts) in fan.directions.iter().zip(&fan.paths) {
        base_tensor(rank, &fan.frame, fan.x, d, &mut u);
        let mut per: HashMap<(usize, usize), f64> = HashMap::new();
        for q in pts {
            let st = grid.stencil(q.x, q.y);
            if st.n == 0 {
                continue;
            }
            pairing_coef(rank, grid, fan.h, q, &mut coef);
            let base = q.w * q.expo.exp();
            for s in 0..st.n {
                for b in 0..nc {
                    *per.entry((st.idx[s], b)).or_insert(0.0) += base * st.w[s] * coef[b];
                }
            }
        }
        for (key, v) in per {
            let e = row.entry(key).or_insert_with(|| vec![0.0; nc]);
            for a in 0..nc {
                e[a] += p * d.weight * u[a] * v;
            }
        }
    }
    row
}

/// Row of `N` at node `n` computed from a fan built at that node.
pub fn brute_force_row(spec: &MetricSpec, grid: &Grid, n: usize, rank: usize, f: f64, h: f64, opts: &FanOptions) -> Result<Vec<Vec<(usize, f64)>>> {
    check_grid(spec, grid)?;
    let fan = fan_at(spec, grid, n, f, h, opts)?;
    let nc = ncomp(rank);
    let row = fan_row(grid, &fan, rank);
    let mut out = vec![Vec::new(); nc];
    for ((node, b), v) in row {
        for a in 0..nc {
            if v[a] != 0.0 {
                out[a].push((node * nc + b, v[a]));
            }
        }
    }
    for r in &mut out {
        r.sort_by_key(|e| e.0);
    }
    Ok(out)
}

impl NormalOperator {
    /// Assemble `N` on conjugated fields. Link-homogeneous metrics on periodic
    /// grids reuse one fan per `x` level (cost `O(nx · fan)` geodesics);
    /// otherwise every node gets its own fan (cost `O(nodes · fan)`).
    pub fn assemble(spec: &MetricSpec, grid: Arc<Grid>, f: f64, h: f64, rank: usize, opts: &FanOptions) -> Result<NormalOperator> {
        check_grid(spec, &grid)?;
        if rank > 2 {
            return Err(Error::Unsupported(format!("rank {rank}")));
        }
        let nc = ncomp(rank);
        let g = grid.clone();
        let shared = spec.is_link_homogeneous() && grid.periodic;
        let per_level = g.ny[0] * g.ny[1];
        let rows: Vec<Result<(Vec<(usize, usize, f64)>, FanStats)>> = if shared {
            (0..g.nx)
                .into_par_iter()
                .map(|i| {
                    let fan = fan_at(spec, &g, g.index(i, 0, 0), f, h, opts)?;
                    let tmpl = fan_row(&g, &fan, rank);
                    let mut trip = Vec::with_capacity(tmpl.len() * nc * per_level);
                    for j in 0..g.ny[0] {
                        for k in 0..g.ny[1] {
                            let n = g.index(i, j, k);
                            for (&(node, b), v) in &tmpl {
                                let (ii, jj, kk) = g.unindex(node);
                                let m = g.index(ii, (jj + j) % g.ny[0], (kk + k) % g.ny[1]);
                                for a in 0..nc {
                                    if v[a] != 0.0 {
                                        trip.push((n * nc + a, m * nc + b, v[a]));
                                    }
                                }
                            }
                        }
                    }
                    Ok((trip, FanStats::of(&fan)))
                })
                .collect()
        } else {
            (0..g.len())
                .into_par_iter()
                .map(|n| {
                    let fan = fan_at(spec, &g, n, f, h, opts)?;
                    let row = fan_row(&g, &fan, rank);
                    let mut trip = Vec::with_capacity(row.len() * nc);
                    for (&(node, b), v) in &row {
                        for a in 0..nc {
                            if v[a] != 0.0 {
                                trip.push((n * nc + a, node * nc + b, v[a]));
                            }
                        }
                    }
                    Ok((trip, FanStats::of(&fan)))
                })
                .collect()
        };
        let dim = g.len() * nc;
        let mut tri = TriMat::new((dim, dim));
        let mut stats = FanStats::empty();
        for r in rows {
            let (trip, st) = r?;
            stats.merge(&st);
            for (i, j, v) in trip {
                tri.add_triplet(i, j, v);
            }
        }
        Ok(NormalOperator { grid, rank, f, h, matrix: tri.to_csr(), stats })
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    /// `N f` for a field in the weighted state.
    pub fn apply(&self, field: &TensorField) -> Result<TensorField> {
        self.check_input(field)?;
        let mut out = TensorField::zeros(self.grid.clone(), self.rank, self.f, self.h)?;
        spmv(&self.matrix, &field.data, &mut out.data);
        Ok(out)
    }

    /// `Nᵀ` in the plain Euclidean sense (used to form weighted adjoints).
    pub fn apply_transpose(&self, field: &TensorField) -> Result<TensorField> {
        self.check_input(field)?;
        let mut out = TensorField::zeros(self.grid.clone(), self.rank, self.f, self.h)?;
        spmv_t(&self.matrix, &field.data, &mut out.data);
        Ok(out)
    }

    fn check_input(&self, field: &TensorField) -> Result<()> {
        if field.rank != self.rank || field.data.len() != self.dim() {
            return Err(Error::Shape(format!("operator of rank {} on field of rank {}", self.rank, field.rank)));
        }
        if *field.grid != *self.grid {
            return Err(Error::Shape("field lives on a different grid".into()));
        }
        if field.state != crate::field::Conjugation::Weighted {
            return Err(Error::State(format!("N acts on weighted fields, got {:?}", field.state)));
        }
        Ok(())
    }

    /// Apply to a plain (unconjugated) field: `e^{FΦ/h} N e^{−FΦ/h}`; overflow
    /// of the outer weight is reported, not clamped.
    pub fn apply_plain(&self, field: &TensorField) -> Result<TensorField> {
        let w = crate::field::apply_conjugation(field, self.f, self.h, -1)?;
        let out = self.apply(&w)?;
        crate::field::apply_conjugation(&out, self.f, self.h, 1)
    }

    /// `‖M − Mᵀ‖_F / ‖M‖_F` of the plain matrix.
    pub fn asymmetry(&self) -> f64 {
        asymmetry_of(&self.matrix)
    }

    /// Asymmetry of `WM` with `W` the field inner-product weights, i.e. the
    /// failure of `N` to be self-adjoint on weighted L².
    pub fn asymmetry_weighted(&self) -> f64 {
        let w = self.grid.dof_weights(self.rank);
        let mut m = self.matrix.clone();
        for (r, mut row) in m.outer_iterator_mut().enumerate() {
            for (_, v) in row.iter_mut() {
                *v *= w[r];
            }
        }
        asymmetry_of(&m)
    }

    /// Dense dump: magic, grid hash, `F`, `h`, rank, dimension, then the
    /// row-major matrix, all little-endian.
    pub fn write_dense<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.dim();
        if n > 20_000 {
            return Err(Error::Parameter(format!("dense dump of dimension {n} refused")));
        }
        w.write_all(DENSE_MAGIC)?;
        w.write_all(self.grid.hash().as_bytes())?;
        w.write_all(&self.f.to_le_bytes())?;
        w.write_all(&self.h.to_le_bytes())?;
        w.write_all(&(self.rank as u32).to_le_bytes())?;
        w.write_all(&(n as u64).to_le_bytes())?;
        let mut row = vec![0.0; n];
        for r in self.matrix.outer_iterator() {
            row.iter_mut().for_each(|v| *v = 0.0);
            for (c, &v) in r.iter() {
                row[c] = v;
            }
            for v in &row {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }
}


fn asymmetry_of(m: &CsMat<f64>) -> f64 {
    let t = m.transpose_view().to_csr();
    let mut num = 0.0;
    let mut den = 0.0;
    for (r, row) in m.outer_iterator().enumerate() {
        for (c, &v) in row.iter() {
            let vt = t.get(r, c).copied().unwrap_or(0.0);
            num += (v - vt) * (v - vt);
            den += v * v;
        }
    }
    for (r, row) in t.outer_iterator().enumerate() {
        for (c, &v) in row.iter() {
            if m.get(r, c).is_none() {
                num += v * v;
            }
        }
    }
    (num / den).sqrt()
}

pub const DENSE_MAGIC: &[u8; 8] = b"CTOMONRM";

/// Header and payload of a dense dump.
#[derive(Clone, Debug)]
pub struct DenseDump {
    pub grid_hash: String,
    pub f: f64,
    pub h: f64,
    pub rank: usize,
    pub n: usize,
    pub data: Vec<f64>,
}

pub fn read_dense<R: Read>(mut r: R) -> Result<DenseDump> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DENSE_MAGIC {
        return Err(Error::Parameter("not a normal-operator dump".into()));
    }
    let mut hash = [0u8; 64];
    r.read_exact(&mut hash)?;
    let mut b8 = [0u8; 8];
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b8)?;
    let f = f64::from_le_bytes(b8);
    r.read_exact(&mut b8)?;
    let h = f64::from_le_bytes(b8);
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b8)?;
    let n = u64::from_le_bytes(b8) as usize;
    let mut data = vec![0.0; n * n];
    for v in &mut data {
        r.read_exact(&mut b8)?;
        *v = f64::from_le_bytes(b8);
    }
    Ok(DenseDump { grid_hash: String::from_utf8_lossy(&hash).into_owned(), f, h, rank, n, data })
}

pub(crate) fn spmv(m: &CsMat<f64>, x: &[f64], y: &mut [f64]) {
    let ip = m.indptr();
    let ip = ip.raw_storage();
    let idx = m.indices();
    let val = m.data();
    y.par_iter_mut().enumerate().for_each(|(r, out)| {
        let mut s = 0.0;
        for k in ip[r]..ip[r + 1] {
            s += val[k] * x[idx[k]];
        }
        *out = s;
    });
}

pub(crate) fn spmv_t(m: &CsMat<f64>, x: &[f64], y: &mut [f64]) {
    y.iter_mut().for_each(|v| *v = 0.0);
    for (r, row) in m.outer_iterator().enumerate() {
        let xr = x[r];
        if xr == 0.0 {
            continue;
        }
        for (c, &v) in row.iter() {
            y[c] += v * xr;
        }
    }
}

/// `N f` by transform-and-backproject along adaptively integrated paths,
/// independent of any assembled matrix.
pub fn apply_path(spec: &MetricSpec, field: &TensorField, opts: &FanOptions) -> Result<(TensorField, FanStats)> {
    let grid = field.grid.clone();
    check_grid(spec, &grid)?;
    if field.state != crate::field::Conjugation::Weighted {
        return Err(Error::State(format!("N acts on weighted fields, got {:?}", field.state)));
    }
    let (f, h, rank) = (field.f, field.h, field.rank);
    let nc = field.ncomp();
    let shared = spec.is_link_homogeneous() && grid.periodic;
    let g = grid.clone();
    let per_level = g.ny[0] * g.ny[1];
    let results: Vec<Result<(Vec<(usize, Vec<f64>)>, FanStats)>> = if shared {
        (0..g.nx)
            .into_par_iter()
            .map(|i| {
                let fan = fan_at(spec, &g, g.index(i, 0, 0), f, h, opts)?;
                let mut out = Vec::with_capacity(per_level);
                for j in 0..g.ny[0] {
                    for k in 0..g.ny[1] {
                        let shift = [j as f64 * g.dy[0], k as f64 * g.dy[1]];
                        let vals = damped_transforms(field, &fan, shift);
                        out.push((g.index(i, j, k), backproject(&vals, &fan, rank)?));
                    }
                }
                Ok((out, FanStats::of(&fan)))
            })
            .collect()
    } else {
        (0..g.len())
            .into_par_iter()
            .map(|n| {
                let fan = fan_at(spec, &g, n, f, h, opts)?;
                let vals = damped_transforms(field, &fan, [0.0, 0.0]);
                let b = backproject(&vals, &fan, rank)?;
                Ok((vec![(n, b)], FanStats::of(&fan)))
            })
            .collect()
    };
    let mut out = TensorField::zeros(grid, rank, f, h)?;
    let mut stats = FanStats::empty();
    for r in results {
        let (rows, st) = r?;
        stats.merge(&st);
        for (n, v) in rows {
            out.data[n * nc..(n + 1) * nc].copy_from_slice(&v);
        }
    }
    Ok((out, stats))
}

/// One output node of `N f` by transform-and-backproject (for probes).
pub fn apply_path_at(spec: &MetricSpec, field: &TensorField, n: usize, opts: &FanOptions) -> Result<Vec<f64>> {
    check_grid(spec, &field.grid)?;
    let fan = fan_at(spec, &field.grid, n, field.f, field.h, opts)?;
    let vals = damped_transforms(field, &fan, [0.0, 0.0]);
    backproject(&vals, &fan, field.rank)
}

/// Closed-form potentials `v` (rank 0 or 1) on the torus collar that vanish at
/// `x = x0` and to infinite order at `x = 0`, with exact `d^s v`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Potential {
    pub rank: usize,
    pub x0: f64,
    /// Per component: radial coefficients `(c0, c1)` and Fourier terms
    /// `(m1, m2, a, b)` for `a cos(m·y) + b sin(m·y)`.
    pub radial: Vec<[f64; 2]>,
    pub modes: Vec<Vec<(i32, i32, f64, f64)>>,
    pub kappa: f64,
}

impl Potential {
    pub fn random(rank: usize, x0: f64, seed: u64) -> Result<Potential> {
        use rand::{Rng, SeedableRng};
        if rank > 1 {
            return Err(Error::Unsupported(format!("potentials of rank {rank}")));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let nc = ncomp(rank);
        let mut radial = Vec::new();
        let mut modes = Vec::new();
        for _ in 0..nc {
            radial.push([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            let mut m = Vec::new();
            for _ in 0..4 {
                m.push((rng.random_range(-2..=2), rng.random_range(-2..=2), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
            }
            modes.push(m);
        }
        Ok(Potential { rank, x0, radial, modes, kappa: 0.01 })
    }

    /// Radial envelope `b(x) = e^{−κx0²/x²}(1 − x/x0)²(c0 + c1 x/x0)` and `b′`.
    fn envelope(&self, c: usize, x: f64) -> (f64, f64) {
        let x0 = self.x0;
        let [c0, c1] = self.radial[c];
        let e = (-self.kappa * x0 * x0 / (x * x)).exp();
        let de = e * 2.0 * self.kappa * x0 * x0 / (x * x * x);
        let s = 1.0 - x / x0;
        let p = c0 + c1 * x / x0;
        let b = e * s * s * p;
        let db = de * s * s * p - e * 2.0 * s / x0 * p + e * s * s * c1 / x0;
        (b, db)
    }

    fn angular(&self, c: usize, y: [f64; 2]) -> (f64, [f64; 2]) {
        let mut a = 0.0;
        let mut da = [0.0; 2];
        for &(m1, m2, ca, cb) in &self.modes[c] {
            let ph = m1 as f64 * y[0] + m2 as f64 * y[1];
            let (s, co) = ph.sin_cos();
            a += ca * co + cb * s;
            let d = -ca * s + cb * co;
            da[0] += d * m1 as f64;
            da[1] += d * m2 as f64;
        }
        (a, da)
    }

    /// Coordinate components of `v` and their partials `∂_c v_b` (`[b][c]`).
    pub fn jet(&self, x: f64, y: [f64; 2]) -> ([f64; 3], [[f64; 3]; 3]) {
        let nc = ncomp(self.rank);
        let mut v = [0.0; 3];
        let mut dv = [[0.0; 3]; 3];
        for c in 0..nc {
            let (b, db) = self.envelope(c, x);
            let (a, da) = self.angular(c, y);
            v[c] = b * a;
            dv[c] = [db * a, b * da[0], b * da[1]];
        }
        (v, dv)
    }

    /// `v(V^{⊗rank})` at a point.
    pub fn pair(&self, x: f64, y: [f64; 2], v: [f64; 3]) -> f64 {
        let (val, _) = self.jet(x, y);
        match self.rank {
            0 => val[0],
            _ => val[0] * v[0] + val[1] * v[1] + val[2] * v[2],
        }
    }

    /// `(d^s v)(V^{⊗(rank+1)})` with the metric's Christoffel symbols.
    pub fn dsym_pair(&self, spec: &MetricSpec, x: f64, y: [f64; 2], v: [f64; 3]) -> Result<f64> {
        let (val, dv) = self.jet(x, y);
        match self.rank {
            0 => Ok(dv[0][0] * v[0] + dv[0][1] * v[1] + dv[0][2] * v[2]),
            _ => {
                let m = metric_unchecked(spec, &Chart::default(), x, y)?;
                let g = m.gamma_contract(&v, &v);
                let mut s = 0.0;
                for b in 0..3 {
                    for c in 0..3 {
                        s += dv[b][c] * v[b] * v[c];
                    }
                    s -= g[b] * val[b];
                }
                Ok(s)
            }
        }
    }
}

/// `(max |I(d^s v)|, scale)` over a set of full geodesics, with scale the
/// largest `|v(γ̇^{⊗rank})|` seen along them.
pub fn potential_transform_check(spec: &MetricSpec, pot: &Potential, paths: &[GeodesicPath]) -> Result<(f64, f64)> {
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    for p in paths {
        let val = transform_with(p, pot.rank + 1, |x, y, v| pot.dsym_pair(spec, x, y, v))?;
        worst = worst.max(val.abs());
        for s in &p.samples {
            let st = &s.state;
            let v = [st.x * st.lambda, st.omega[0], st.omega[1]];
            // unit-speed tangent is xV
            let k = st.x.powi(pot.rank as i32);
            scale = scale.max((k * pot.pair(st.x, st.y, v)).abs());
        }
    }
    Ok((worst, scale))
}

/// Full geodesics through `(x, y)` in the fan directions of `(F, h)`.
#[allow(clippy::too_many_arguments)]
pub fn fan_geodesics(spec: &MetricSpec, x: f64, y: [f64; 2], f: f64, h: f64, n_lambda: usize, n_omega: usize, tol: f64) -> Result<Vec<GeodesicPath>> {
    let opts = FanOptions { n_lambda, n_omega, route: Route::Path, step: 0.5, tol };
    check_fan_args(spec, f, h)?;
    let fw = frame_weights_unchecked(spec.x0, spec.p_exponent, x, h);
    let dl = fw.wy / (x * fw.wx);
    let gh = hermite(opts.n_lambda);
    let mut inits = Vec::new();
    for k in 0..n_omega {
        let th = TAU * k as f64 / n_omega as f64 + PI / n_omega as f64;
        let om = [th.cos(), th.sin()];
        let alpha = fan_alpha(spec, x, y, om, h)?;
        let s = 2.0 * (alpha / f).abs().sqrt();
        for u in &gh.nodes {
            let lam = (s * u * dl).clamp(-0.99, 0.99);
            let c = (1.0 - lam * lam).sqrt();
            inits.push(crate::geodesic::GeodesicState { x, y, lambda: lam, omega: [om[0] * c, om[1] * c], t: 0.0 });
        }
    }
    inits.par_iter().map(|s| crate::geodesic::shoot(spec, s, tol)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Conjugation;
    use crate::geodesic::{shoot, GeodesicState};

    fn spec() -> MetricSpec {
        MetricSpec::cone(0.5, Link::Torus)
    }

    #[test]
    fn fan_weights_integrate_the_cutoff() {
        let s = spec();
        let fan = build_fan(&s, (0.025, 0.5), 0.1, [0.3, 0.2], 1.0, 0.1, &FanOptions::matrix()).unwrap();
        assert_eq!(fan.directions.len(), 16 * 32);
        assert!(fan.directions.iter().all(|d| d.weight > 0.0));
        // ∫χ̃ dλ dω̂ = 2π·(2π|ν|)^{1/2}·dλ/dλ̂
        let fw = fan.frame;
        let nu = fan.directions[0].nu;
        let exact = TAU * (TAU * nu.abs()).sqrt() * fw.wy / (0.1 * fw.wx);
        // 16-node Hermite on e^{−u²}·e^{−u²}
        assert!((fan.cutoff_mass() - exact).abs() < 1e-6 * exact, "{} vs {exact}", fan.cutoff_mass());
        assert!(fan.capped_fraction() < 1e-6);
        assert!(fan.cutoff_tail(6.0) < 1e-7);
        assert!((nu + 0.5).abs() < 1e-12);
        assert!(fan.max_exponent < 5.0, "{}", fan.max_exponent);
    }

    #[test]
    fn taper_only_acts_in_the_blend_zone() {
        let s = spec();
        let g = Grid::torus(0.5, 16, 4, 4).unwrap();
        let [b0, _, _, b3] = crate::geometry::frame_breaks(0.5);
        for i in 0..16 {
            let fan = fan_at(&s, &g, g.index(i, 0, 0), 1.0, 0.05, &FanOptions::matrix()).unwrap();
            assert!(fan.max_exponent < TAPER.1);
            if fan.x < b0 || fan.x > b3 {
                // mass removed by the taper alone, then including the Hermite rule error
                let untapered: f64 = fan.directions.iter().map(|d| d.weight * d.log_chi_gaussian.exp()).sum();
                assert!(1.0 - fan.cutoff_mass() / untapered < 1e-6, "x = {}", fan.x);
                assert!(fan.capped_fraction() < 1e-5, "x = {}: {}", fan.x, fan.capped_fraction());
                assert!(fan.max_exponent < 0.0);
            }
            assert!(fan.cutoff_mass() > 0.0);
        }
    }

    #[test]
    fn sc_regime_alpha_is_minus_half_x() {
        let s = spec();
        let a = fan_alpha(&s, 0.4, [0.0, 0.0], [1.0, 0.0], 0.1).unwrap();
        assert!((a + 0.2).abs() < 1e-12);
        let a = fan_alpha(&s, 0.1, [0.0, 0.0], [0.6, 0.8], 0.1).unwrap();
        assert!((a + 0.5).abs() < 1e-12);
    }

    #[test]
    fn radial_ray_matches_simpson() {
        // rank 0 along a radial ray: ∫ f ds = ∫ f(x) dx / x²
        let s = spec();
        let prof = |x: f64| (-((x - 0.2) / 0.03).powi(2)).exp();
        let path = shoot(&s, &GeodesicState { x: 0.2, y: [0.0, 0.0], lambda: -1.0, omega: [0.0, 0.0], t: 0.0 }, 1e-11).unwrap();
        let v = transform_with(&path, 0, |x, _, _| Ok(prof(x))).unwrap();
        let (a, b) = (0.05, 0.45);
        let m = 200_000;
        let hstep = (b - a) / m as f64;
        let mut acc = 0.0;
        for k in 0..=m {
            let x = a + k as f64 * hstep;
            let w = if k == 0 || k == m { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * prof(x) / (x * x);
        }
        acc *= hstep / 3.0;
        assert!((v - acc).abs() < 1e-8 * acc, "{v} vs {acc}");
        // the grid field is piecewise linear, so Gauss points see kinks
        let g = Arc::new(Grid::torus(0.5, 400, 4, 4).unwrap());
        let mut fld = TensorField::zeros(g.clone(), 0, 1.0, 0.1).unwrap();
        for n in 0..g.len() {
            fld.data[n] = prof(g.node(n).0);
        }
        let vg = transform_one(&fld, &path).unwrap();
        assert!((vg - acc).abs() < 1e-3 * acc, "{vg} vs {acc}");
    }

    #[test]
    fn potentials_are_in_the_kernel() {
        let s = spec();
        let paths = fan_geodesics(&s, 0.15, [0.4, 1.0], 1.0, 0.1, 4, 8, 1e-11).unwrap();
        for rank in 0..2 {
            for seed in 0..3 {
                let p = Potential::random(rank, 0.5, seed).unwrap();
                let (w, sc) = potential_transform_check(&s, &p, &paths).unwrap();
                assert!(w <= 1e-5 * sc, "rank {rank}: {w} vs {sc}");
            }
        }
    }

    #[test]
    fn potential_jet_matches_finite_differences() {
        let p = Potential::random(1, 0.5, 7).unwrap();
        let (x, y) = (0.2, [0.3, 0.7]);
        let (_, dv) = p.jet(x, y);
        let e = 1e-6;
        for c in 0..3 {
            let mut xp = (x, y);
            let mut xm = (x, y);
            match c {
                0 => {
                    xp.0 += e;
                    xm.0 -= e;
                }
                j => {
                    xp.1[j - 1] += e;
                    xm.1[j - 1] -= e;
                }
            }
            let (vp, _) = p.jet(xp.0, xp.1);
            let (vm, _) = p.jet(xm.0, xm.1);
            for b in 0..3 {
                let fd = (vp[b] - vm[b]) / (2.0 * e);
                assert!((fd - dv[b][c]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn backprojection_of_constants() {
        let s = spec();
        let fan = build_fan(&s, (0.025, 0.5), 0.3, [0.0, 0.0], 1.0, 0.1, &FanOptions::matrix()).unwrap();
        let zero = vec![0.0; fan.directions.len()];
        assert!(backproject(&zero, &fan, 1).unwrap().iter().all(|&v| v == 0.0));
        let ones = vec![1.0; fan.directions.len()];
        let b = backproject(&ones, &fan, 1).unwrap();
        // sphere-average oracle: P_1 Σ w g_h(V)
        let p = prefactor(1, &fan.frame, fan.x, fan.h);
        let mut acc = [0.0; 3];
        for d in &fan.directions {
            acc[0] += d.weight * fan.frame.wx * fan.x * d.lambda;
            acc[1] += d.weight * fan.frame.wy * d.omega[0];
            acc[2] += d.weight * fan.frame.wy * d.omega[1];
        }
        for c in 0..3 {
            assert!((b[c] - p * acc[c]).abs() < 1e-12 * (1.0 + b[c].abs()));
        }
        let r2 = prefactor(2, &fan.frame, 0.3, 0.1) / prefactor(1, &fan.frame, 0.3, 0.1);
        assert!((r2 - 0.1 * 0.09).abs() < 1e-15);
        assert!(backproject(&ones[1..], &fan, 1).is_err());
    }

    #[test]
    fn matrix_rows_match_brute_force() {
        let s = spec();
        let g = Arc::new(Grid::torus(0.5, 8, 8, 8).unwrap());
        let op = NormalOperator::assemble(&s, g.clone(), 1.0, 0.1, 0, &FanOptions::matrix()).unwrap();
        for &n in &[g.index(3, 2, 5), g.index(7, 7, 0), g.index(0, 4, 4)] {
            let row = brute_force_row(&s, &g, n, 0, 1.0, 0.1, &FanOptions::matrix()).unwrap();
            let r = op.matrix.outer_view(n).unwrap();
            let dense: HashMap<usize, f64> = r.iter().map(|(c, &v)| (c, v)).collect();
            let scale = row[0].iter().map(|e| e.1.abs()).fold(0.0, f64::max);
            for &(c, v) in &row[0] {
                let m = dense.get(&c).copied().unwrap_or(0.0);
                assert!((m - v).abs() < 1e-10 * scale, "{m} vs {v}");
            }
            assert_eq!(row[0].len(), dense.len());
        }
        assert!(op.stats.max_exponent < 5.0);
    }

    #[test]
    fn normal_operator_is_linear_and_nearly_symmetric() {
        let s = spec();
        let g = Arc::new(Grid::torus(0.5, 8, 8, 8).unwrap());
        for rank in 0..3 {
            let op = NormalOperator::assemble(&s, g.clone(), 1.0, 0.1, rank, &FanOptions::matrix()).unwrap();
            let a = TensorField::random_smooth(g.clone(), rank, 1.0, 0.1, 1).unwrap();
            let b = TensorField::random_smooth(g.clone(), rank, 1.0, 0.1, 2).unwrap();
            let mut ab = a.clone();
            ab.scale(2.0);
            ab.axpy(-3.0, &b).unwrap();
            let mut lhs = op.apply(&ab).unwrap();
            let mut rhs = op.apply(&a).unwrap();
            rhs.scale(2.0);
            rhs.axpy(-3.0, &op.apply(&b).unwrap()).unwrap();
            lhs.axpy(-1.0, &rhs).unwrap();
            assert!(lhs.norm() <= 1e-12 * rhs.norm());
            let z = TensorField::zeros(g.clone(), rank, 1.0, 0.1).unwrap();
            assert_eq!(op.apply(&z).unwrap().norm(), 0.0);
            let asym = op.asymmetry();
            assert!(asym < 0.1, "rank {rank}: {asym}");
            assert!(op.asymmetry_weighted() < 0.02);
            assert!(op.stats.max_exponent < 5.0);
            assert!(op.stats.max_cutoff_tail < 1e-7);
            assert!(op.stats.max_capped_fraction < 1.0);
        }
    }

    #[test]
    fn path_route_agrees_with_matrix_route() {
        let s = spec();
        let g = Arc::new(Grid::torus(0.5, 8, 8, 8).unwrap());
        for rank in 0..3 {
            let op = NormalOperator::assemble(&s, g.clone(), 1.0, 0.1, rank, &FanOptions::matrix()).unwrap();
            let a = TensorField::random_smooth(g.clone(), rank, 1.0, 0.1, 4).unwrap();
            let m = op.apply(&a).unwrap();
            let (p, _) = apply_path(&s, &a, &FanOptions::path()).unwrap();
            let gap = p.sub(&m).unwrap().norm() / m.norm();
            assert!(gap < 2e-4, "rank {rank}: {gap}");
        }
    }

    #[test]
    fn plain_wrapper_flags_overflow() {
        let s = spec();
        let g = Arc::new(Grid::torus(0.5, 8, 4, 4).unwrap());
        let op = NormalOperator::assemble(&s, g.clone(), 1.0, 0.01, 0, &FanOptions::matrix()).unwrap();
        let mut a = TensorField::random_smooth(g, 0, 1.0, 0.01, 4).unwrap();
        a.state = Conjugation::Plain;
        assert!(matches!(op.apply_plain(&a), Err(Error::Overflow { .. })));
    }

    #[test]
    fn dense_dump_round_trip() {
        let s = spec();
        let g = Arc::new(Grid::torus(0.5, 4, 4, 4).unwrap());
        let op = NormalOperator::assemble(&s, g.clone(), 1.0, 0.1, 1, &FanOptions::matrix()).unwrap();
        let mut buf = Vec::new();
        op.write_dense(&mut buf).unwrap();
        let d = read_dense(&buf[..]).unwrap();
        assert_eq!(d.grid_hash, g.hash());
        assert_eq!((d.rank, d.n, d.f, d.h), (1, op.dim(), 1.0, 0.1));
        for (r, row) in op.matrix.outer_iterator().enumerate() {
            for (c, &v) in row.iter() {
                assert_eq!(d.data[r * d.n + c], v);
            }
        }
    }
}
