//! Principal symbols of the conjugated gauge operators and of the normal
//! operator, kernel bases of the divergence symbol, ellipticity margins and
//! wave-packet probing of discrete operators.
//!
//! Symbols follow the convention in which the conjugated symmetric gradient
//! on functions has symbol `(ξ − iF, η)`; the true symbol is `i` times this.
//! Rank-2 slot vectors use orthonormal symmetric coordinates (off-diagonal
//! entries scaled by `√2`), so `σ(δ) = σ(d)ᴴ` holds as a matrix identity.

use std::f64::consts::{PI, SQRT_2, TAU};
use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Grid, TensorField, PAIRS};
use crate::geometry::{frame_breaks, frame_weights, metric_at, MetricSpec, Regime};
use crate::quadrature::{circle, circle_graded, hermite};

pub type C64 = Complex64;

const I: C64 = C64 { re: 0.0, im: 1.0 };

fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

/// Labels of tensor slots.
pub fn slot_labels(rank: usize) -> Vec<String> {
    match rank {
        0 => vec!["1".into()],
        1 => vec!["dx".into(), "dy1".into(), "dy2".into()],
        _ => {
            let n = ["dx", "dy1", "dy2"];
            PAIRS.iter().map(|&(a, b)| format!("{}.{}", n[a], n[b])).collect()
        }
    }
}

pub fn nslots(rank: usize) -> usize {
    crate::field::ncomp(rank)
}

/// Scale of a stored symmetric component in orthonormal coordinates.
pub fn slot_scale(rank: usize, c: usize) -> f64 {
    if rank == 2 && PAIRS[c].0 != PAIRS[c].1 {
        SQRT_2
    } else {
        1.0
    }
}

/// A point of the sc-1c fiber together with the zeroth-order data the symbols
/// need at its base: the frame-change term `b_s` and the quadratic form `A`
/// with `α(ω) = ωᵀAω` for unit frame directions `ω`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FiberPoint {
    pub x: f64,
    pub y: [f64; 2],
    pub xi: f64,
    pub eta: [f64; 2],
    pub f: f64,
    pub h: f64,
    pub regime: Regime,
    pub bs: [[C64; 2]; 2],
    pub alpha_form: [[f64; 2]; 2],
}

impl FiberPoint {
    /// Exact cone over the flat torus: `b_s = i·I` and `α = −1/2` in the 1c
    /// regime, `b_s = i·x·I` and `α = −x/2` in the sc regime.
    pub fn model(regime: Regime, x: f64, xi: f64, eta: [f64; 2], f: f64) -> FiberPoint {
        let s = if regime == Regime::Scattering { x } else { 1.0 };
        FiberPoint {
            x,
            y: [0.0, 0.0],
            xi,
            eta,
            f,
            h: 0.0,
            regime,
            bs: [[I * s, c(0.0)], [c(0.0), I * s]],
            alpha_form: [[-0.5 * s, 0.0], [0.0, -0.5 * s]],
        }
    }

    /// Base data read off a metric: `b_s = i·Γ⁰_{jk}·w_x/w_y²` and
    /// `A_{jk} = −Φ′Γ⁰_{jk}/(2h·w_y²)`.
    pub fn on_metric(spec: &MetricSpec, x: f64, y: [f64; 2], xi: f64, eta: [f64; 2], f: f64, h: f64) -> Result<FiberPoint> {
        if !(f > 0.0) {
            return Err(Error::Parameter(format!("F = {f} must be positive")));
        }
        let fw = frame_weights(spec, x, h)?;
        if fw.regime == Regime::Interior {
            return Err(Error::Domain(format!("x = {x} lies in the blend zone {:?}", frame_breaks(spec.x0))));
        }
        let m = metric_at(spec, x, y)?;
        let dphi = crate::field::phi_deriv(x, spec.x0)?;
        let mut bs = [[c(0.0); 2]; 2];
        let mut af = [[0.0; 2]; 2];
        for j in 0..2 {
            for k in 0..2 {
                let g0 = m.gamma[0][j + 1][k + 1];
                bs[j][k] = I * (g0 * fw.wx / (fw.wy * fw.wy));
                af[j][k] = -dphi * g0 / (2.0 * h * fw.wy * fw.wy);
            }
        }
        Ok(FiberPoint { x, y, xi, eta, f, h, regime: fw.regime, bs, alpha_form: af })
    }

    pub fn without_bs(mut self) -> FiberPoint {
        self.bs = [[c(0.0); 2]; 2];
        self
    }

    pub fn with_fiber(mut self, xi: f64, eta: [f64; 2]) -> FiberPoint {
        self.xi = xi;
        self.eta = eta;
        self
    }

    pub fn alpha(&self, w: [f64; 2]) -> f64 {
        let a = &self.alpha_form;
        w[0] * (a[0][0] * w[0] + a[0][1] * w[1]) + w[1] * (a[1][0] * w[0] + a[1][1] * w[1])
    }

    pub fn fiber_norm(&self) -> f64 {
        (self.xi * self.xi + self.eta[0] * self.eta[0] + self.eta[1] * self.eta[1]).sqrt()
    }

    /// Compactified fiber coordinate `1/|(ξ, η)|`.
    pub fn rho_fiber(&self) -> f64 {
        1.0 / self.fiber_norm()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SymbolMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub m: DMatrix<C64>,
}

impl SymbolMatrix {
    fn new(rank_out: usize, rank_in: usize, m: DMatrix<C64>) -> SymbolMatrix {
        SymbolMatrix { rows: slot_labels(rank_out), cols: slot_labels(rank_in), m }
    }

    pub fn adjoint(&self) -> SymbolMatrix {
        SymbolMatrix { rows: self.cols.clone(), cols: self.rows.clone(), m: self.m.adjoint() }
    }

    pub fn mul(&self, other: &SymbolMatrix) -> Result<SymbolMatrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!("cannot compose {:?} with {:?}", self.cols, other.rows)));
        }
        Ok(SymbolMatrix { rows: self.rows.clone(), cols: other.cols.clone(), m: &self.m * &other.m })
    }

    /// Hermitian part `(M + Mᴴ)/2`.
    pub fn hermitian_part(&self) -> DMatrix<C64> {
        (&self.m + self.m.adjoint()) * c(0.5)
    }
}

/// Symbol of the conjugated symmetric gradient from rank `rank_in` to
/// `rank_in + 1`.
pub fn sigma_d(p: &FiberPoint, rank_in: usize) -> Result<SymbolMatrix> {
    let zb = C64::new(p.xi, -p.f);
    let eta = p.eta;
    match rank_in {
        0 => Ok(SymbolMatrix::new(1, 0, DMatrix::from_column_slice(3, 1, &[zb, c(eta[0]), c(eta[1])]))),
        1 => {
            let mut m = DMatrix::zeros(6, 3);
            for (row, &(a, b)) in PAIRS.iter().enumerate() {
                let s = slot_scale(2, row);
                match (a, b) {
                    (0, 0) => m[(row, 0)] = zb,
                    (0, j) => {
                        m[(row, j)] = zb * (0.5 * s);
                        m[(row, 0)] = c(0.5 * s * eta[j - 1]);
                    }
                    (j, k) => {
                        m[(row, k)] += c(0.5 * s * eta[j - 1]);
                        m[(row, j)] += c(0.5 * s * eta[k - 1]);
                        m[(row, 0)] = p.bs[j - 1][k - 1] * s;
                    }
                }
            }
            Ok(SymbolMatrix::new(2, 1, m))
        }
        r => Err(Error::Unsupported(format!("symmetric gradient of rank {r}"))),
    }
}

/// Divergence symbol from rank `rank_in` to `rank_in − 1`.
pub fn sigma_delta(p: &FiberPoint, rank_in: usize) -> Result<SymbolMatrix> {
    if !(1..=2).contains(&rank_in) {
        return Err(Error::Unsupported(format!("divergence of rank {rank_in}")));
    }
    Ok(sigma_d(p, rank_in - 1)?.adjoint())
}

pub fn sigma_laplacian(p: &FiberPoint, rank: usize) -> Result<SymbolMatrix> {
    if rank > 1 {
        return Err(Error::Unsupported(format!("Laplacian on rank {rank}")));
    }
    sigma_delta(p, rank + 1)?.mul(&sigma_d(p, rank)?)
}

pub fn sigma_ddelta(p: &FiberPoint, rank: usize) -> Result<SymbolMatrix> {
    if !(1..=2).contains(&rank) {
        return Err(Error::Unsupported(format!("dδ on rank {rank}")));
    }
    sigma_d(p, rank - 1)?.mul(&sigma_delta(p, rank)?)
}

/// Which right factor to pair with in the factorized moment matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientVariant {
    /// Right factor is the adjoint of the left one (moments of `ŵ₀`).
    Adjoint,
    /// `C₀₂ = ν²z²φ⁻²ρ² + 2iναφ⁻¹z` with `z = ξ + iF`: the second-moment
    /// correction with the opposite sign. Kept for comparison sweeps only.
    FlippedCorrection,
}

/// The factorized moment coefficients `C_{i0}`, `C_{0j}` at one direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CList {
    pub phi: f64,
    pub nu: f64,
    pub rho: f64,
    pub c10: C64,
    pub c20: C64,
    pub c01: C64,
    pub c02: C64,
}

impl CList {
    pub fn left(&self, i: usize) -> C64 {
        [c(1.0), self.c10, self.c20][i]
    }

    pub fn right(&self, j: usize) -> C64 {
        [c(1.0), self.c01, self.c02][j]
    }

    /// `C_{ij} = C_{i0}·C_{0j}`.
    pub fn product(&self, i: usize, j: usize) -> C64 {
        self.left(i) * self.right(j)
    }
}

/// `φ = −ν(ξ² + F²)`, `ν = α/F`, `ρ = η·ω` and the coefficient list.
pub fn c_list(p: &FiberPoint, omega: [f64; 2], variant: CoefficientVariant) -> Result<CList> {
    let alpha = p.alpha(omega);
    if !(alpha < 0.0) {
        return Err(Error::Precondition(format!("α = {alpha} must be negative")));
    }
    if !(p.f > 0.0) {
        return Err(Error::Parameter(format!("F = {} must be positive", p.f)));
    }
    let nu = alpha / p.f;
    let phi = -nu * (p.xi * p.xi + p.f * p.f);
    if !(phi > 0.0) {
        return Err(Error::Numerical(format!("φ = {phi} must be positive")));
    }
    let rho = p.eta[0] * omega[0] + p.eta[1] * omega[1];
    let zb = C64::new(p.xi, -p.f);
    let z = C64::new(p.xi, p.f);
    let c10 = zb * (nu * rho / phi);
    let c20 = zb * zb * (nu * nu * rho * rho / (phi * phi)) + I * zb * (2.0 * nu * alpha / phi);
    let c01 = z * (nu * rho / phi);
    let c02 = match variant {
        CoefficientVariant::Adjoint => z * z * (nu * nu * rho * rho / (phi * phi)) - I * z * (2.0 * nu * alpha / phi),
        CoefficientVariant::FlippedCorrection => {
            z * z * (nu * nu * rho * rho / (phi * phi)) + I * z * (2.0 * nu * alpha / phi)
        }
    };
    Ok(CList { phi, nu, rho, c10, c20, c01, c02 })
}

/// Joint moments `E[λ̂^i ŵ₀^j]`, `i, j ≤ 2`, of the complex Gaussian weight
/// `exp(λ̂²/(2ν) + (F + iξ)(λ̂t̂ + αt̂²) + iρt̂)` in `(λ̂, t̂)`, with
/// `ŵ₀ = λ̂ + 2αt̂`, computed from its mean and covariance without assuming
/// they decorrelate. Also returns the total mass.
pub fn c_moments(p: &FiberPoint, omega: [f64; 2]) -> Result<([[C64; 3]; 3], C64)> {
    let alpha = p.alpha(omega);
    if !(alpha < 0.0) {
        return Err(Error::Precondition(format!("α = {alpha} must be negative")));
    }
    let nu = alpha / p.f;
    let rho = p.eta[0] * omega[0] + p.eta[1] * omega[1];
    let k = C64::new(p.f, p.xi);
    // exponent = −½ sᵀ A s + bᵀ s with s = (λ̂, t̂)
    let a11 = c(-1.0 / nu);
    let a12 = -k;
    let a22 = -k * (2.0 * alpha);
    let det = a11 * a22 - a12 * a12;
    let s11 = a22 / det;
    let s12 = -a12 / det;
    let s22 = a11 / det;
    let b2 = I * rho;
    let m1 = s12 * b2;
    let m2 = s22 * b2;
    let mass = c(TAU) / det.sqrt() * (0.5 * b2 * b2 * s22).exp();
    // X = λ̂, Y = ŵ₀
    let mx = m1;
    let my = m1 + m2 * (2.0 * alpha);
    let sx = s11;
    let sy = s11 + s12 * (4.0 * alpha) + s22 * (4.0 * alpha * alpha);
    let cxy = s11 + s12 * (2.0 * alpha);
    let mut e = [[c(0.0); 3]; 3];
    e[0][0] = c(1.0);
    e[1][0] = mx;
    e[0][1] = my;
    e[2][0] = mx * mx + sx;
    e[0][2] = my * my + sy;
    e[1][1] = mx * my + cxy;
    e[2][1] = mx * mx * my + sx * my + cxy * mx * 2.0;
    e[1][2] = my * my * mx + sy * mx + cxy * my * 2.0;
    e[2][2] = mx * mx * my * my + sx * my * my + sy * mx * mx + sx * sy + cxy * cxy * 2.0 + cxy * mx * my * 4.0;
    Ok((e, mass))
}

/// Orthonormal-coordinate slot vector built from `(c_0, c_1, c_2)` coefficients
/// of `u^{⊗m}` with `u = (λ̂, ω)`.
fn moment_vector(rank: usize, cl: [C64; 3], omega: [f64; 2], out: &mut [C64]) {
    match rank {
        0 => out[0] = cl[0],
        1 => {
            out[0] = cl[1];
            out[1] = c(omega[0]);
            out[2] = c(omega[1]);
        }
        _ => {
            for (k, &(a, b)) in PAIRS.iter().enumerate() {
                let s = slot_scale(2, k);
                out[k] = match (a, b) {
                    (0, 0) => cl[2],
                    (0, j) => cl[1] * omega[j - 1],
                    (j, l) => c(omega[j - 1] * omega[l - 1]),
                } * s;
            }
        }
    }
}

/// Direction nodes on the circle adapted to a Gaussian factor in `η·ω` of
/// angular width `width` (nodes `(θ, weight)`).
fn omega_nodes(eta: [f64; 2], width: f64) -> Vec<(f64, f64)> {
    let n = (eta[0] * eta[0] + eta[1] * eta[1]).sqrt();
    if n == 0.0 || !(width < 0.5) {
        return circle(64, 0.0);
    }
    let th = eta[1].atan2(eta[0]);
    circle_graded(&[th + 0.5 * PI, th - 0.5 * PI], (12.0 * width).min(1.0), 16, 10)
}

/// Finite-point symbol of the normal operator up to its positive scalar
/// prefactor: `2π(ξ² + F²)^{−1/2} ∫ e^{−ρ²/(2φ)} L(ω) R(ω)ᵀ dω`, with `L`
/// built from `C_{i0}` and `R` from `C_{0j}`.
pub fn sigma_normal_finite(p: &FiberPoint, rank: usize, variant: CoefficientVariant) -> Result<SymbolMatrix> {
    if rank > 2 {
        return Err(Error::Unsupported(format!("rank {rank}")));
    }
    let n = nslots(rank);
    let amin = {
        let a = &p.alpha_form;
        let tr = a[0][0] + a[1][1];
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        0.5 * tr + (0.25 * tr * tr - det).max(0.0).sqrt()
    };
    if !(amin < 0.0) {
        return Err(Error::Precondition("α must be negative in every direction".into()));
    }
    let phi_min = -(amin / p.f) * (p.xi * p.xi + p.f * p.f);
    let en = (p.eta[0] * p.eta[0] + p.eta[1] * p.eta[1]).sqrt();
    let width = if en > 0.0 { phi_min.sqrt() / en } else { f64::INFINITY };
    let nodes = omega_nodes(p.eta, width);
    let mut acc = DMatrix::<C64>::zeros(n, n);
    let mut l = vec![c(0.0); n];
    let mut r = vec![c(0.0); n];
    for (th, w) in nodes {
        let om = [th.cos(), th.sin()];
        let cl = c_list(p, om, variant)?;
        let g = (-cl.rho * cl.rho / (2.0 * cl.phi)).exp() * w;
        if g == 0.0 {
            continue;
        }
        moment_vector(rank, [c(1.0), cl.c10, cl.c20], om, &mut l);
        moment_vector(rank, [c(1.0), cl.c01, cl.c02], om, &mut r);
        for i in 0..n {
            let li = l[i] * g;
            for j in 0..n {
                acc[(i, j)] += li * r[j];
            }
        }
    }
    acc *= c(TAU / (p.xi * p.xi + p.f * p.f).sqrt());
    Ok(SymbolMatrix::new(rank, rank, acc))
}

/// Fiber-infinity symbol in the direction `(ξ̂, η̂)` (unit):
/// `(2π/|ξ̂|) ∫ χ̃(−η̂·ω/ξ̂) u^{⊗m}(u^{⊗m})ᵀ dω` with `u = (λ̂, ω)` and
/// `χ̃(s) = e^{s²/(2ν)}`; the `ξ̂ → 0` limit is taken in closed form.
pub fn sigma_normal_infinity(xi_hat: f64, eta_hat: [f64; 2], rank: usize, alpha: f64, f: f64) -> Result<SymbolMatrix> {
    let nrm = (xi_hat * xi_hat + eta_hat[0] * eta_hat[0] + eta_hat[1] * eta_hat[1]).sqrt();
    if (nrm - 1.0).abs() > 1e-9 {
        return Err(Error::Parameter(format!("(ξ̂, η̂) must be a unit vector, |·| = {nrm}")));
    }
    if !(alpha < 0.0) {
        return Err(Error::Precondition(format!("α = {alpha} must be negative")));
    }
    let nu = alpha / f;
    let n = nslots(rank);
    let en = (eta_hat[0] * eta_hat[0] + eta_hat[1] * eta_hat[1]).sqrt();
    let mut acc = DMatrix::<C64>::zeros(n, n);
    let mut u = vec![c(0.0); n];
    let mut add = |lam: f64, om: [f64; 2], w: f64, acc: &mut DMatrix<C64>| {
        moment_vector(rank, [c(1.0), c(lam), c(lam * lam)], om, &mut u);
        for i in 0..n {
            for j in 0..n {
                acc[(i, j)] += u[i] * u[j] * w;
            }
        }
    };
    let width = xi_hat.abs() * (-nu).sqrt() / en.max(1e-300);
    if en > 0.0 && width < 1e-6 {
        // the equator collapses onto ω ⊥ η̂; integrate χ̃ in λ̂ exactly
        let gh = hermite(8);
        let sc = (-2.0 * nu).sqrt();
        let perp = [-eta_hat[1] / en, eta_hat[0] / en];
        for sgn in [1.0, -1.0] {
            let om = [sgn * perp[0], sgn * perp[1]];
            for (s, w) in gh.nodes.iter().zip(&gh.weights) {
                add(sc * s, om, w * sc * TAU / en, &mut acc);
            }
        }
    } else {
        for (th, w) in omega_nodes(eta_hat, width) {
            let om = [th.cos(), th.sin()];
            let lam = -(eta_hat[0] * om[0] + eta_hat[1] * om[1]) / xi_hat;
            let g = (lam * lam / (2.0 * nu)).exp();
            if g > 0.0 {
                add(lam, om, w * g * TAU / xi_hat.abs(), &mut acc);
            }
        }
    }
    Ok(SymbolMatrix::new(rank, rank, acc))
}

/// Orthonormal basis of the kernel of a divergence symbol.
#[derive(Clone, Debug)]
pub struct KernelBasis {
    /// Columns are basis vectors.
    pub basis: DMatrix<C64>,
    pub dimension: usize,
    /// Number of independent conditions found.
    pub conditions: usize,
}

pub fn nullspace(m: &DMatrix<C64>, rel_tol: f64) -> KernelBasis {
    let g = m.adjoint() * m;
    let n = g.nrows();
    let eig = SymmetricEigen::new(g);
    let top = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let cols: Vec<usize> = (0..n).filter(|&k| eig.eigenvalues[k] <= rel_tol * top.max(1e-300)).collect();
    let mut basis = DMatrix::zeros(n, cols.len());
    for (j, &k) in cols.iter().enumerate() {
        basis.set_column(j, &eig.eigenvectors.column(k));
    }
    KernelBasis { basis, dimension: cols.len(), conditions: n - cols.len() }
}

/// Kernel of `σ(δ)` on rank-`rank` tensors at a finite point.
pub fn kernel_basis(p: &FiberPoint, rank: usize) -> Result<KernelBasis> {
    let s = sigma_delta(p, rank)?;
    Ok(nullspace(&s.m, 1e-12))
}

/// Kernel of the fiber-infinity divergence symbol (`F` and `b_s` drop out).
pub fn kernel_basis_infinity(xi_hat: f64, eta_hat: [f64; 2], rank: usize) -> Result<KernelBasis> {
    let p = FiberPoint::model(Regime::OneCusp, 0.0, xi_hat, eta_hat, 0.0).without_bs();
    kernel_basis(&p, rank)
}

/// Smallest eigenvalue of the Hermitian part and smallest singular value of
/// `Kᴴ a K`.
pub fn restricted_margin(a: &DMatrix<C64>, k: &DMatrix<C64>) -> (f64, f64) {
    if k.ncols() == 0 {
        return (f64::INFINITY, f64::INFINITY);
    }
    let r = k.adjoint() * a * k;
    let h = (&r + r.adjoint()) * c(0.5);
    let ev = SymmetricEigen::new(h).eigenvalues;
    let min_eig = ev.iter().cloned().fold(f64::INFINITY, f64::min);
    let sv = r.singular_values();
    let min_sv = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    (min_eig, min_sv)
}

/// Sampling of the fiber used by margin sweeps.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleSpec {
    /// Values taken by each of `ξ`, `η₁`, `η₂`.
    pub axis: Vec<f64>,
    pub infinity_dirs: usize,
    /// Base points `x` for the 1c and sc regimes (exact-cone model).
    pub x_1c: f64,
    pub x_sc: f64,
}

impl Default for SampleSpec {
    fn default() -> Self {
        SampleSpec::log_grid(17, 1e3, 64)
    }
}

impl SampleSpec {
    /// `0` plus `±` an `(n−1)/2`-point log grid from `1e-2` to `r`.
    pub fn log_grid(n: usize, r: f64, infinity_dirs: usize) -> SampleSpec {
        let m = (n.max(3) - 1) / 2;
        let (lo, hi) = (1e-2f64.ln(), r.ln());
        let mut axis = vec![0.0];
        for k in 0..m {
            let v = (lo + (hi - lo) * k as f64 / (m - 1).max(1) as f64).exp();
            axis.push(v);
            axis.push(-v);
        }
        axis.sort_by(|a, b| a.partial_cmp(b).unwrap());
        SampleSpec { axis, infinity_dirs, x_1c: 0.05, x_sc: 0.45 }
    }

    pub fn finite_points(&self) -> Vec<(f64, [f64; 2])> {
        let mut out = Vec::with_capacity(self.axis.len().pow(3));
        for &xi in &self.axis {
            for &e1 in &self.axis {
                for &e2 in &self.axis {
                    out.push((xi, [e1, e2]));
                }
            }
        }
        out
    }

    /// Fibonacci points on the unit sphere of `(ξ̂, η̂)` plus eight equatorial
    /// directions with `ξ̂ = 0`.
    pub fn infinity_points(&self) -> Vec<(f64, [f64; 2])> {
        let n = self.infinity_dirs;
        let golden = PI * (3.0 - 5f64.sqrt());
        let mut out: Vec<(f64, [f64; 2])> = (0..n)
            .map(|k| {
                let z = 1.0 - 2.0 * (k as f64 + 0.5) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let t = golden * k as f64;
                (z, [r * t.cos(), r * t.sin()])
            })
            .collect();
        out.extend((0..8).map(|k| {
            let t = TAU * k as f64 / 8.0 + 0.1;
            (0.0, [t.cos(), t.sin()])
        }));
        out
    }
}

/// What a margin sweep certifies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum MarginKind {
    /// Normal symbol restricted to the kernel of `σ(δ)`.
    Kernel,
    /// `σ(N) + m₀⟨ζ⟩⁻³σ(d)σ(δ)` on the whole slot space.
    Combined { m0: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MarginSample {
    pub regime: Regime,
    pub at_infinity: bool,
    pub xi: f64,
    pub eta: [f64; 2],
    /// Smallest eigenvalue of the Hermitian part, scaled by `⟨(ξ, η, F)⟩`
    /// (the symbols have order −1).
    pub margin: f64,
    pub min_singular: f64,
    pub eigenvector: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MarginReport {
    pub rank: usize,
    pub f: f64,
    pub kind: MarginKind,
    pub margin: f64,
    pub min_singular: f64,
    pub worst: MarginSample,
    pub finite_margin: f64,
    pub infinity_margin: f64,
    pub samples: Vec<MarginSample>,
}

impl MarginReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["regime", "at_infinity", "xi", "eta1", "eta2", "margin", "min_singular", "eigenvector"])
            .map_err(crate::geodesic::csv_err)?;
        for s in &self.samples {
            let ev: Vec<String> = s.eigenvector.iter().map(|z| format!("{:.6e}{:+.6e}i", z[0], z[1])).collect();
            wr.write_record(&[
                format!("{:?}", s.regime),
                s.at_infinity.to_string(),
                crate::geodesic::fmt(s.xi),
                crate::geodesic::fmt(s.eta[0]),
                crate::geodesic::fmt(s.eta[1]),
                crate::geodesic::fmt(s.margin),
                crate::geodesic::fmt(s.min_singular),
                ev.join(" "),
            ])
            .map_err(crate::geodesic::csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn min_eigvec(h: DMatrix<C64>) -> (f64, Vec<[f64; 2]>) {
    let e = SymmetricEigen::new(h);
    let (k, v) = e
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (k, &v)| if v < acc.1 { (k, v) } else { acc });
    (v, e.eigenvectors.column(k).iter().map(|z| [z.re, z.im]).collect())
}

fn sample_margin(
    a: &DMatrix<C64>,
    k: Option<&DMatrix<C64>>,
    scale: f64,
    regime: Regime,
    at_infinity: bool,
    xi: f64,
    eta: [f64; 2],
) -> MarginSample {
    let r = match k {
        Some(k) => k.adjoint() * a * k,
        None => a.clone(),
    };
    if r.ncols() == 0 {
        return MarginSample { regime, at_infinity, xi, eta, margin: f64::INFINITY, min_singular: f64::INFINITY, eigenvector: vec![] };
    }
    let h = (&r + r.adjoint()) * c(0.5);
    let (ev, vec) = min_eigvec(h);
    let sv = r.singular_values().iter().cloned().fold(f64::INFINITY, f64::min);
    MarginSample { regime, at_infinity, xi, eta, margin: ev * scale, min_singular: sv * scale, eigenvector: vec }
}

/// Margin sweep over the finite samples and fiber-infinity directions of both
/// regimes on the exact-cone model.
pub fn ellipticity_margin(
    rank: usize,
    f: f64,
    spec: &SampleSpec,
    kind: MarginKind,
    variant: CoefficientVariant,
) -> Result<MarginReport> {
    if !(1..=2).contains(&rank) {
        return Err(Error::Unsupported(format!("margins for rank {rank}")));
    }
    if !(f > 0.0) {
        return Err(Error::Parameter(format!("F = {f} must be positive")));
    }
    if let MarginKind::Combined { m0 } = kind {
        if !(m0 > 0.0) {
            return Err(Error::Parameter(format!("m0 = {m0} must be positive")));
        }
    }
    let finite = spec.finite_points();
    let inf = spec.infinity_points();
    let mut samples = Vec::new();
    for (regime, x) in [(Regime::OneCusp, spec.x_1c), (Regime::Scattering, spec.x_sc)] {
        let base = FiberPoint::model(regime, x, 0.0, [0.0, 0.0], f);
        let fin: Vec<Result<MarginSample>> = finite
            .par_iter()
            .map(|&(xi, eta)| {
                let p = base.with_fiber(xi, eta);
                let a = sigma_normal_finite(&p, rank, variant)?.m;
                let bracket = (1.0 + xi * xi + f * f + eta[0] * eta[0] + eta[1] * eta[1]).sqrt();
                Ok(match kind {
                    MarginKind::Kernel => {
                        let k = kernel_basis(&p, rank)?;
                        sample_margin(&a, Some(&k.basis), bracket, regime, false, xi, eta)
                    }
                    MarginKind::Combined { m0 } => {
                        let dd = sigma_ddelta(&p, rank)?.m;
                        let full = a + dd * c(m0 / bracket.powi(3));
                        sample_margin(&full, None, bracket, regime, false, xi, eta)
                    }
                })
            })
            .collect();
        for s in fin {
            samples.push(s?);
        }
        let alpha = base.alpha([1.0, 0.0]);
        let infs: Vec<Result<MarginSample>> = inf
            .par_iter()
            .map(|&(xh, eh)| {
                let a = sigma_normal_infinity(xh, eh, rank, alpha, f)?.m;
                Ok(match kind {
                    MarginKind::Kernel => {
                        let k = kernel_basis_infinity(xh, eh, rank)?;
                        sample_margin(&a, Some(&k.basis), 1.0, regime, true, xh, eh)
                    }
                    MarginKind::Combined { m0 } => {
                        let p = FiberPoint::model(regime, x, xh, eh, 0.0).without_bs();
                        let dd = sigma_ddelta(&p, rank)?.m;
                        sample_margin(&(a + dd * c(m0)), None, 1.0, regime, true, xh, eh)
                    }
                })
            })
            .collect();
        for s in infs {
            samples.push(s?);
        }
    }
    let pick = |inf: bool| {
        samples.iter().filter(|s| s.at_infinity == inf).map(|s| s.margin).fold(f64::INFINITY, f64::min)
    };
    let worst = samples
        .iter()
        .min_by(|a, b| a.margin.partial_cmp(&b.margin).unwrap_or(std::cmp::Ordering::Equal))
        .cloned()
        .ok_or_else(|| Error::Parameter("empty sample spec".into()))?;
    let min_singular = samples.iter().map(|s| s.min_singular).fold(f64::INFINITY, f64::min);
    Ok(MarginReport {
        rank,
        f,
        kind,
        margin: worst.margin,
        min_singular,
        finite_margin: pick(false),
        infinity_margin: pick(true),
        worst,
        samples,
    })
}

/// Margin as a function of `F`; the report keeps only the summary numbers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepPoint {
    pub f: f64,
    pub margin: f64,
    pub finite_margin: f64,
    pub infinity_margin: f64,
    pub worst_xi: f64,
    pub worst_eta: [f64; 2],
}

pub fn margin_sweep(
    rank: usize,
    fs: &[f64],
    spec: &SampleSpec,
    kind: MarginKind,
    variant: CoefficientVariant,
) -> Result<Vec<SweepPoint>> {
    fs.iter()
        .map(|&f| {
            let r = ellipticity_margin(rank, f, spec, kind, variant)?;
            Ok(SweepPoint {
                f,
                margin: r.margin,
                finite_margin: r.finite_margin,
                infinity_margin: r.infinity_margin,
                worst_xi: r.worst.xi,
                worst_eta: r.worst.eta,
            })
        })
        .collect()
}

/// First `F` in an increasing sweep at which the margin turns positive after
/// being non-positive, if any.
pub fn crossing(sweep: &[SweepPoint]) -> Option<f64> {
    sweep.windows(2).find(|w| w[0].margin <= 0.0 && w[1].margin > 0.0).map(|w| w[1].f)
}

/// Wave packet centred in a grid, in frame-unit coordinates
/// `X = w_x(x_c)·x_c·(q − q_c)`, `Y = w_y(x_c)·(y − y_c)`.
pub struct Packet {
    pub cos: TensorField,
    pub sin: TensorField,
    pub centre: usize,
}

/// Build the real and imaginary parts of `e^{−|Z|²/(2w²)} e^{i(ξX + η·Y)}`
/// on a rank-0 field; `width` is in frame units and must cover 4 cells.
pub fn wave_packet(grid: std::sync::Arc<Grid>, centre: usize, xi: f64, eta: [f64; 2], f: f64, h: f64, width: f64) -> Result<Packet> {
    let (i0, j0, k0) = grid.unindex(centre);
    let (xc, yc) = grid.node(centre);
    let fw = grid.frame(xc, h);
    let sx = fw.wx * xc * grid.dq;
    let sy = [fw.wy * grid.dy[0], fw.wy * grid.dy[1]];
    if width < 4.0 * sx.max(sy[0]).max(sy[1]) {
        return Err(Error::Parameter(format!(
            "packet width {width} unresolved by cells ({sx:.3}, {:.3}, {:.3})",
            sy[0], sy[1]
        )));
    }
    let mut re = TensorField::zeros(grid.clone(), 0, f, h)?;
    let mut im = TensorField::zeros(grid.clone(), 0, f, h)?;
    let per = [grid.ny[0] as f64 * grid.dy[0], grid.ny[1] as f64 * grid.dy[1]];
    for n in 0..grid.len() {
        let (i, j, k) = grid.unindex(n);
        let xq = (i as f64 - i0 as f64) * sx;
        let mut dy = [grid.y_at(0, j) - yc[0], grid.y_at(1, k) - yc[1]];
        if grid.periodic {
            for a in 0..2 {
                dy[a] -= per[a] * (dy[a] / per[a]).round();
            }
        }
        let _ = (j0, k0);
        let yy = [fw.wy * dy[0], fw.wy * dy[1]];
        let env = (-(xq * xq + yy[0] * yy[0] + yy[1] * yy[1]) / (2.0 * width * width)).exp();
        let ph = xi * xq + eta[0] * yy[0] + eta[1] * yy[1];
        re.data[n] = env * ph.cos();
        im.data[n] = env * ph.sin();
    }
    Ok(Packet { cos: re, sin: im, centre })
}

/// Apply a real linear operator to a wave packet and return the complex ratio
/// (output at the centre)/(input at the centre).
pub fn probe_operator_symbol<F>(op: F, packet: &Packet) -> Result<C64>
where
    F: Fn(&TensorField) -> Result<TensorField>,
{
    let a = op(&packet.cos)?;
    let b = op(&packet.sin)?;
    let n = packet.centre;
    let out = C64::new(a.data[n], 0.0) + I * b.data[n];
    let inp = C64::new(packet.cos.data[n], packet.sin.data[n]);
    Ok(out / inp)
}

/// Least-squares slope of `ln|y|` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.abs().ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

pub fn to_dvector(v: &[C64]) -> DVector<C64> {
    DVector::from_column_slice(v)
}
