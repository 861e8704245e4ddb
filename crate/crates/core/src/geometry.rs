//! Asymptotically conic metrics `dx²/x⁴ + g̃/x²` on a collar `(0, x0] × Y`,
//! their duals, Christoffel symbols and the semiclassical frame weights.
//!
//! Coordinates are `(x, y1, y2)` with index 0 for `x`. On the torus the link
//! chart is the periodic square `[0, 2π)²`; on the sphere it is a spherical
//! chart `(θ, φ)` whose pole can be rotated with a [`Chart`].

use nalgebra::{Matrix2, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::TensorField;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Sphere,
    Torus,
}

/// Scalar function on the link used to shape a perturbation term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Profile {
    /// `cos(m1 y1 + m2 y2 + phase)` on the torus.
    Fourier { modes: [i32; 2], phase: f64 },
    /// `(axis · u)^degree` on the sphere, `u` the unit position vector.
    Zonal { axis: [f64; 3], degree: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    /// `ε x^k a(y) g0` added to the link block.
    Conformal,
    /// `ε x^k (dx ⊗ da + da ⊗ dx)/2`-type cross term, stored as `g̃_{0j} = ε x^k ∂_j a`.
    Cross,
    /// `ε x^k a(y) dx²`.
    Radial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationTerm {
    pub kind: PerturbationKind,
    pub amplitude: f64,
    pub x_power: u32,
    pub profile: Profile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSpec {
    pub x0: f64,
    pub link: Link,
    #[serde(default)]
    pub perturbation: Vec<PerturbationTerm>,
    #[serde(default = "default_p")]
    pub p_exponent: f64,
}

fn default_p() -> f64 {
    1.0
}

impl MetricSpec {
    pub fn cone(x0: f64, link: Link) -> Self {
        MetricSpec { x0, link, perturbation: Vec::new(), p_exponent: 1.0 }
    }

    pub fn with_term(mut self, term: PerturbationTerm) -> Self {
        self.perturbation.push(term);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x0 > 0.0 && self.x0 < 1.0) {
            return Err(Error::Parameter(format!("x0 = {} must lie in (0, 1)", self.x0)));
        }
        if !(self.p_exponent > 0.0) {
            return Err(Error::Parameter("p_exponent must be positive".into()));
        }
        for t in &self.perturbation {
            if t.x_power < 1 {
                return Err(Error::Parameter(
                    "perturbation x_power must be >= 1 so that g̃ restricts to the link metric".into(),
                ));
            }
            if !t.amplitude.is_finite() {
                return Err(Error::Parameter("perturbation amplitude must be finite".into()));
            }
            match (&t.profile, self.link) {
                (Profile::Fourier { .. }, Link::Torus) => {}
                (Profile::Zonal { axis, .. }, Link::Sphere) => {
                    let n = Vector3::from(*axis).norm();
                    if !(n > 0.0) {
                        return Err(Error::Parameter("zonal axis must be nonzero".into()));
                    }
                }
                _ => {
                    return Err(Error::Parameter(
                        "Fourier profiles belong to the torus, zonal profiles to the sphere".into(),
                    ))
                }
            }
        }
        Ok(())
    }

    /// True when no term depends on the link point, so the metric is invariant
    /// under link translations (torus) and geodesic families can be reused.
    pub fn is_link_homogeneous(&self) -> bool {
        self.link == Link::Torus
            && self.perturbation.iter().all(|t| match t.profile {
                Profile::Fourier { modes, .. } => modes == [0, 0] && t.kind != PerturbationKind::Cross,
                Profile::Zonal { .. } => false,
            })
    }

    /// Lowest x reached by geodesics and grids.
    pub fn x_min(&self) -> f64 {
        1e-3 * self.x0
    }
}

/// Rotation of the spherical chart: `u = rot · (sinθ cosφ, sinθ sinφ, cosθ)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Chart {
    pub rot: Matrix3<f64>,
}

impl Default for Chart {
    fn default() -> Self {
        Chart { rot: Matrix3::identity() }
    }
}

impl Chart {
    /// Chart whose equator is the great circle through `u` with direction `v`.
    pub fn adapted(u: Vector3<f64>, v: Vector3<f64>) -> Self {
        let e3 = u.cross(&v);
        let e3 = if e3.norm() > 1e-12 {
            e3.normalize()
        } else {
            let trial = if u.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
            u.cross(&trial).normalize()
        };
        let e1 = u.normalize();
        let e2 = e3.cross(&e1);
        Chart { rot: Matrix3::from_columns(&[e1, e2, e3]) }
    }

    pub fn point(&self, y: [f64; 2]) -> Vector3<f64> {
        let (st, ct) = y[0].sin_cos();
        let (sp, cp) = y[1].sin_cos();
        self.rot * Vector3::new(st * cp, st * sp, ct)
    }

    /// First and second derivatives of the embedding in chart coordinates.
    pub fn jets(&self, y: [f64; 2]) -> SphereJets {
        let (st, ct) = y[0].sin_cos();
        let (sp, cp) = y[1].sin_cos();
        let r = self.rot;
        SphereJets {
            u: r * Vector3::new(st * cp, st * sp, ct),
            d: [r * Vector3::new(ct * cp, ct * sp, -st), r * Vector3::new(-st * sp, st * cp, 0.0)],
            dd: [
                [r * Vector3::new(-st * cp, -st * sp, -ct), r * Vector3::new(-ct * sp, ct * cp, 0.0)],
                [r * Vector3::new(-ct * sp, ct * cp, 0.0), r * Vector3::new(-st * cp, -st * sp, 0.0)],
            ],
        }
    }

    pub fn coords(&self, u: Vector3<f64>) -> [f64; 2] {
        let l = self.rot.transpose() * u;
        let theta = l.z.clamp(-1.0, 1.0).acos();
        let phi = l.y.atan2(l.x);
        [theta, phi]
    }

    /// Chart velocity of an ambient tangent vector `v` at chart point `y`.
    pub fn velocity(&self, y: [f64; 2], v: Vector3<f64>) -> [f64; 2] {
        let j = self.jets(y);
        let st = y[0].sin();
        [j.d[0].dot(&v), j.d[1].dot(&v) / (st * st)]
    }

    pub fn ambient_velocity(&self, y: [f64; 2], w: [f64; 2]) -> Vector3<f64> {
        let j = self.jets(y);
        j.d[0] * w[0] + j.d[1] * w[1]
    }
}

pub struct SphereJets {
    pub u: Vector3<f64>,
    pub d: [Vector3<f64>; 2],
    pub dd: [[Vector3<f64>; 2]; 2],
}

/// Value, gradient and Hessian of a profile in chart coordinates.
#[derive(Clone, Copy, Debug)]
pub struct ProfileJet {
    pub a: f64,
    pub grad: [f64; 2],
    pub hess: [[f64; 2]; 2],
}

pub fn profile_jet(profile: &Profile, chart: &Chart, y: [f64; 2]) -> ProfileJet {
    match *profile {
        Profile::Fourier { modes, phase } => {
            let m = [modes[0] as f64, modes[1] as f64];
            let arg = m[0] * y[0] + m[1] * y[1] + phase;
            let (s, c) = arg.sin_cos();
            ProfileJet {
                a: c,
                grad: [-m[0] * s, -m[1] * s],
                hess: [[-m[0] * m[0] * c, -m[0] * m[1] * c], [-m[1] * m[0] * c, -m[1] * m[1] * c]],
            }
        }
        Profile::Zonal { axis, degree } => {
            let n = Vector3::from(axis).normalize();
            let j = chart.jets(y);
            let s = n.dot(&j.u);
            let ds = [n.dot(&j.d[0]), n.dot(&j.d[1])];
            let d = degree as f64;
            let p0 = s.powi(degree as i32);
            let p1 = if degree >= 1 { d * s.powi(degree as i32 - 1) } else { 0.0 };
            let p2 = if degree >= 2 { d * (d - 1.0) * s.powi(degree as i32 - 2) } else { 0.0 };
            let mut hess = [[0.0; 2]; 2];
            for a in 0..2 {
                for b in 0..2 {
                    hess[a][b] = p2 * ds[a] * ds[b] + p1 * n.dot(&j.dd[a][b]);
                }
            }
            ProfileJet { a: p0, grad: [p1 * ds[0], p1 * ds[1]], hess }
        }
    }
}

/// Link metric `g0` in chart coordinates and its chart derivatives.
pub fn link_metric(link: Link, y: [f64; 2]) -> (Matrix2<f64>, [Matrix2<f64>; 2]) {
    match link {
        Link::Torus => (Matrix2::identity(), [Matrix2::zeros(), Matrix2::zeros()]),
        Link::Sphere => {
            let (st, ct) = y[0].sin_cos();
            let g = Matrix2::new(1.0, 0.0, 0.0, st * st);
            let dth = Matrix2::new(0.0, 0.0, 0.0, 2.0 * st * ct);
            (g, [dth, Matrix2::zeros()])
        }
    }
}

/// Gaussian curvature of the link metric at a chart point.
pub fn link_curvature(link: Link, _y: [f64; 2]) -> f64 {
    match link {
        Link::Torus => 0.0,
        Link::Sphere => 1.0,
    }
}

/// Metric data at a point: `g`, `g⁻¹` in the coordinate basis `(∂x, ∂y)` and in
/// the scattering basis `(x²∂x, x∂y)`, the Christoffel symbols `Γ^l_{jk}`
/// (stored `gamma[l][j][k]`), and `g̃` itself.
#[derive(Clone, Debug)]
pub struct MetricBlocks {
    pub x: f64,
    pub g: Matrix3<f64>,
    pub g_inv: Matrix3<f64>,
    pub g_sc: Matrix3<f64>,
    pub g_sc_inv: Matrix3<f64>,
    pub gamma: [[[f64; 3]; 3]; 3],
    pub gtilde: Matrix3<f64>,
}

impl MetricBlocks {
    /// `Γ^l(u, v)` contracted with two coordinate vectors.
    pub fn gamma_contract(&self, u: &[f64; 3], v: &[f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (l, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for j in 0..3 {
                for k in 0..3 {
                    s += self.gamma[l][j][k] * u[j] * v[k];
                }
            }
            *o = s;
        }
        out
    }

    pub fn norm2(&self, v: &[f64; 3]) -> f64 {
        let v = Vector3::from(*v);
        v.dot(&(self.g * v))
    }
}

/// `g̃` and its coordinate derivatives `∂_c g̃` at a point.
pub fn gtilde_jet(spec: &MetricSpec, chart: &Chart, x: f64, y: [f64; 2]) -> (Matrix3<f64>, [Matrix3<f64>; 3]) {
    let (g0, dg0) = link_metric(spec.link, y);
    let mut conf = 0.0;
    let mut conf_dx = 0.0;
    let mut conf_dy = [0.0; 2];
    let mut gt = Matrix3::zeros();
    let mut d = [Matrix3::zeros(); 3];
    for t in &spec.perturbation {
        let k = t.x_power as i32;
        let xk = t.amplitude * x.powi(k);
        let xk1 = t.amplitude * (k as f64) * x.powi(k - 1);
        let pj = profile_jet(&t.profile, chart, y);
        match t.kind {
            PerturbationKind::Conformal => {
                conf += xk * pj.a;
                conf_dx += xk1 * pj.a;
                conf_dy[0] += xk * pj.grad[0];
                conf_dy[1] += xk * pj.grad[1];
            }
            PerturbationKind::Radial => {
                gt[(0, 0)] += xk * pj.a;
                d[0][(0, 0)] += xk1 * pj.a;
                d[1][(0, 0)] += xk * pj.grad[0];
                d[2][(0, 0)] += xk * pj.grad[1];
            }
            PerturbationKind::Cross => {
                for j in 0..2 {
                    gt[(0, j + 1)] += xk * pj.grad[j];
                    gt[(j + 1, 0)] += xk * pj.grad[j];
                    d[0][(0, j + 1)] += xk1 * pj.grad[j];
                    d[0][(j + 1, 0)] += xk1 * pj.grad[j];
                    for l in 0..2 {
                        d[l + 1][(0, j + 1)] += xk * pj.hess[l][j];
                        d[l + 1][(j + 1, 0)] += xk * pj.hess[l][j];
                    }
                }
            }
        }
    }
    for a in 0..2 {
        for b in 0..2 {
            gt[(a + 1, b + 1)] = g0[(a, b)] * (1.0 + conf);
            d[0][(a + 1, b + 1)] = g0[(a, b)] * conf_dx;
            for l in 0..2 {
                d[l + 1][(a + 1, b + 1)] = dg0[l][(a, b)] * (1.0 + conf) + g0[(a, b)] * conf_dy[l];
            }
        }
    }
    (gt, d)
}

pub fn metric_at(spec: &MetricSpec, x: f64, y: [f64; 2]) -> Result<MetricBlocks> {
    metric_in_chart(spec, &Chart::default(), x, y)
}

pub fn metric_in_chart(spec: &MetricSpec, chart: &Chart, x: f64, y: [f64; 2]) -> Result<MetricBlocks> {
    if !(x > 0.0) || x > spec.x0 * (1.0 + 1e-12) {
        return Err(Error::Domain(format!("x = {x} outside (0, {}]", spec.x0)));
    }
    metric_unchecked(spec, chart, x, y)
}

/// Metric evaluation without the collar check, used by integrators that may
/// step marginally past `x0` before locating the exit.
pub fn metric_unchecked(spec: &MetricSpec, chart: &Chart, x: f64, y: [f64; 2]) -> Result<MetricBlocks> {
    if !(x > 0.0) {
        return Err(Error::Domain(format!("x = {x} must be positive")));
    }
    let (gt, dgt) = gtilde_jet(spec, chart, x, y);
    let x2 = x * x;
    let x3 = x2 * x;
    let mut g = gt / x2;
    g[(0, 0)] += 1.0 / (x2 * x2);
    let mut dg = [Matrix3::zeros(); 3];
    dg[0] = dgt[0] / x2 - gt * (2.0 / x3);
    dg[0][(0, 0)] -= 4.0 / (x2 * x3);
    dg[1] = dgt[1] / x2;
    dg[2] = dgt[2] / x2;

    let s = Matrix3::from_diagonal(&Vector3::new(x2, x, x));
    let g_sc = s * g * s;
    if g_sc.cholesky().is_none() {
        return Err(Error::DegenerateMetric(format!("g not positive definite at x = {x}, y = {y:?}")));
    }
    let g_sc_inv = g_sc
        .try_inverse()
        .ok_or_else(|| Error::DegenerateMetric("singular scattering block".into()))?;
    let g_inv = s * g_sc_inv * s;

    let mut gamma = [[[0.0; 3]; 3]; 3];
    for (l, gl) in gamma.iter_mut().enumerate() {
        for j in 0..3 {
            for k in j..3 {
                let mut acc = 0.0;
                for r in 0..3 {
                    acc += g_inv[(l, r)] * (dg[k][(r, j)] + dg[j][(r, k)] - dg[r][(j, k)]);
                }
                gl[j][k] = 0.5 * acc;
                gl[k][j] = 0.5 * acc;
            }
        }
    }
    Ok(MetricBlocks { x, g, g_inv, g_sc, g_sc_inv, gamma, gtilde: gt })
}

/// Inverse of a symmetric 3×3 matrix by the Schur complement of its `(0,0)`
/// entry, mirroring the block form of the dual metric.
pub fn dual_blockwise(g: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let a = g[(0, 0)];
    let b = nalgebra::Vector2::new(g[(1, 0)], g[(2, 0)]);
    let c = Matrix2::new(g[(1, 1)], g[(1, 2)], g[(2, 1)], g[(2, 2)]);
    let ci = c.try_inverse()?;
    let cib = ci * b;
    let schur = a - b.dot(&cib);
    if schur == 0.0 {
        return None;
    }
    let s_inv = 1.0 / schur;
    let mut out = Matrix3::zeros();
    out[(0, 0)] = s_inv;
    for i in 0..2 {
        out[(0, i + 1)] = -s_inv * cib[i];
        out[(i + 1, 0)] = -s_inv * cib[i];
        for j in 0..2 {
            out[(i + 1, j + 1)] = ci[(i, j)] + s_inv * cib[i] * cib[j];
        }
    }
    Some(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    OneCusp,
    Interior,
    Scattering,
}

/// Weights of the frame `w_x dx, w_y dy_j`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameWeights {
    pub wx: f64,
    pub wy: f64,
    pub regime: Regime,
}

/// Quintic smoothstep on `[0, 1]`, clamped outside.
pub fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * t * (10.0 + t * (-15.0 + 6.0 * t))
}

pub fn smoothstep_deriv(t: f64) -> f64 {
    if !(0.0..=1.0).contains(&t) {
        return 0.0;
    }
    30.0 * t * t * (1.0 - t) * (1.0 - t)
}

/// Break points of the frame partition: one-cusp below `x0/3`, a plateau of
/// interior weights on `[4x0/9, 5x0/9]`, scattering above `2x0/3`.
pub fn frame_breaks(x0: f64) -> [f64; 4] {
    [x0 / 3.0, 4.0 * x0 / 9.0, 5.0 * x0 / 9.0, 2.0 * x0 / 3.0]
}

pub fn frame_weights(spec: &MetricSpec, x: f64, h: f64) -> Result<FrameWeights> {
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("h = {h} must be positive")));
    }
    if !(x > 0.0) || x > spec.x0 * (1.0 + 1e-12) {
        return Err(Error::Domain(format!("x = {x} outside (0, {}]", spec.x0)));
    }
    Ok(frame_weights_unchecked(spec.x0, spec.p_exponent, x, h))
}

pub fn frame_weights_unchecked(x0: f64, p: f64, x: f64, h: f64) -> FrameWeights {
    let [b0, b1, b2, b3] = frame_breaks(x0);
    let lh = h.ln();
    // log weights (w_x, w_y) in each regime
    let cusp = || (-(lh + (2.0 * p + 1.0) * x.ln()), -(0.5 * lh + p * x.ln()));
    let interior = (-lh, -0.5 * lh);
    let scat = || {
        let r = (x0 - x).max(f64::MIN_POSITIVE);
        (-(lh + 2.0 * r.ln()), -(0.5 * lh + r.ln()))
    };
    let (lx, ly, regime) = if x <= b0 {
        let (a, b) = cusp();
        (a, b, Regime::OneCusp)
    } else if x < b1 {
        let s = smoothstep((x - b0) / (b1 - b0));
        let (a, b) = cusp();
        ((1.0 - s) * a + s * interior.0, (1.0 - s) * b + s * interior.1, Regime::Interior)
    } else if x <= b2 {
        (interior.0, interior.1, Regime::Interior)
    } else if x < b3 {
        let s = smoothstep((x - b2) / (b3 - b2));
        let (a, b) = scat();
        ((1.0 - s) * interior.0 + s * a, (1.0 - s) * interior.1 + s * b, Regime::Interior)
    } else {
        let (a, b) = scat();
        (a, b, Regime::Scattering)
    };
    FrameWeights { wx: lx.exp(), wy: ly.exp(), regime }
}

/// Discrete weighted L² pairing of two fields in the frame metric with density
/// `dx dy / x^{n+1}`.
pub fn sc_1c_inner_product(a: &TensorField, b: &TensorField) -> Result<f64> {
    a.check_compatible(b)?;
    Ok(a.inner(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn perturbed_torus(eps: f64) -> MetricSpec {
        MetricSpec::cone(0.5, Link::Torus)
            .with_term(PerturbationTerm {
                kind: PerturbationKind::Conformal,
                amplitude: eps,
                x_power: 1,
                profile: Profile::Fourier { modes: [1, 2], phase: 0.3 },
            })
            .with_term(PerturbationTerm {
                kind: PerturbationKind::Cross,
                amplitude: eps,
                x_power: 1,
                profile: Profile::Fourier { modes: [2, -1], phase: 0.1 },
            })
            .with_term(PerturbationTerm {
                kind: PerturbationKind::Radial,
                amplitude: eps,
                x_power: 2,
                profile: Profile::Fourier { modes: [0, 1], phase: 0.0 },
            })
    }

    fn perturbed_sphere(eps: f64) -> MetricSpec {
        MetricSpec::cone(0.5, Link::Sphere)
            .with_term(PerturbationTerm {
                kind: PerturbationKind::Conformal,
                amplitude: eps,
                x_power: 1,
                profile: Profile::Zonal { axis: [0.3, 0.4, 0.5], degree: 2 },
            })
            .with_term(PerturbationTerm {
                kind: PerturbationKind::Cross,
                amplitude: eps,
                x_power: 1,
                profile: Profile::Zonal { axis: [1.0, 0.0, 0.2], degree: 1 },
            })
    }

    #[test]
    fn cone_scattering_blocks_are_constant() {
        let spec = MetricSpec::cone(0.5, Link::Torus);
        for &x in &[0.01, 0.1, 0.2] {
            let a = metric_at(&spec, x, [0.3, 1.0]).unwrap();
            let b = metric_at(&spec, 2.0 * x, [0.3, 1.0]).unwrap();
            assert!((a.g_sc - Matrix3::identity()).norm() < 1e-12);
            assert!((a.g_sc - b.g_sc).norm() < 1e-12);
            assert!((a.g_sc_inv - Matrix3::identity()).norm() < 1e-12);
            assert!((a.g_inv[(0, 0)] - x.powi(4)).abs() < 1e-12 * x.powi(4));
        }
    }

    #[test]
    fn restriction_to_boundary_is_link_metric() {
        let spec = perturbed_sphere(0.3);
        let chart = Chart::default();
        for &y in &[[0.4, 0.2], [1.2, -2.0], [2.5, 3.0]] {
            let (gt, _) = gtilde_jet(&spec, &chart, 0.0, y);
            let (g0, _) = link_metric(Link::Sphere, y);
            for a in 0..2 {
                for b in 0..2 {
                    assert_eq!(gt[(a + 1, b + 1)], g0[(a, b)]);
                }
            }
            assert_eq!(gt[(0, 1)], 0.0);
            assert_eq!(gt[(0, 0)], 0.0);
        }
    }

    #[test]
    fn off_diagonal_scattering_blocks_are_order_x() {
        let spec = perturbed_torus(0.5);
        let mut ratios = Vec::new();
        for k in 3..14 {
            let x = 0.5 * 2f64.powi(-k);
            let m = metric_at(&spec, x, [0.7, 2.1]).unwrap();
            ratios.push((m.g_sc[(0, 1)].abs() + m.g_sc[(0, 2)].abs()) / x);
        }
        let max = ratios.iter().cloned().fold(0.0, f64::max);
        assert!(max < 2.0, "ratios {ratios:?}");
    }

    #[test]
    fn dual_blockwise_matches_inverse() {
        let spec = perturbed_torus(0.3);
        for &x in &[0.002, 0.05, 0.3, 0.5] {
            let m = metric_at(&spec, x, [1.1, 0.4]).unwrap();
            let d = dual_blockwise(&m.g_sc).unwrap();
            assert!((d - m.g_sc_inv).norm() < 1e-10);
            let id = m.g_sc * m.g_sc_inv;
            assert!((id - Matrix3::identity()).norm() < 1e-12);
        }
    }

    #[test]
    fn christoffels_are_symmetric() {
        let spec = perturbed_sphere(0.2);
        let m = metric_at(&spec, 0.1, [1.0, 0.5]).unwrap();
        for l in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    assert_eq!(m.gamma[l][j][k], m.gamma[l][k][j]);
                }
            }
        }
    }

    // Independent oracle: central differences of the metric in r = 1/x
    // coordinates, plugged into the Christoffel formula directly.
    fn cone_gamma_r_oracle(r: f64, th: f64) -> [[[f64; 3]; 3]; 3] {
        let metric = |r: f64, th: f64| -> Matrix3<f64> {
            Matrix3::new(1.0, 0.0, 0.0, 0.0, r * r, 0.0, 0.0, 0.0, r * r * th.sin().powi(2))
        };
        let hstep = 1e-5;
        let dr = (metric(r + hstep, th) - metric(r - hstep, th)) / (2.0 * hstep);
        let dth = (metric(r, th + hstep) - metric(r, th - hstep)) / (2.0 * hstep);
        let dg = [dr, dth, Matrix3::zeros()];
        let gi = metric(r, th).try_inverse().unwrap();
        let mut out = [[[0.0; 3]; 3]; 3];
        for l in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    let mut acc = 0.0;
                    for q in 0..3 {
                        acc += gi[(l, q)] * (dg[k][(q, j)] + dg[j][(q, k)] - dg[q][(j, k)]);
                    }
                    out[l][j][k] = 0.5 * acc;
                }
            }
        }
        out
    }

    #[test]
    fn exact_cone_christoffels_in_radial_coordinates() {
        let spec = MetricSpec::cone(0.9, Link::Sphere);
        let (r, th) = (3.0, 0.8);
        let x = 1.0 / r;
        let m = metric_at(&spec, x, [th, 0.2]).unwrap();
        // transform Γ from (x, θ, φ) to (r, θ, φ): x = 1/r
        let dxdr = -1.0 / (r * r);
        let d2xdr2 = 2.0 / (r * r * r);
        let drdx = 1.0 / dxdr;
        let jac = [dxdr, 1.0, 1.0];
        let inv = [drdx, 1.0, 1.0];
        let mut gr = [[[0.0; 3]; 3]; 3];
        for l in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    let mut v = inv[l] * jac[j] * jac[k] * m.gamma[l][j][k];
                    if l == 0 && j == 0 && k == 0 {
                        v += inv[0] * d2xdr2;
                    }
                    gr[l][j][k] = v;
                }
            }
        }
        let oracle = cone_gamma_r_oracle(r, th);
        for l in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    assert!((gr[l][j][k] - oracle[l][j][k]).abs() < 1e-8, "{l}{j}{k}");
                }
            }
        }
        assert!((gr[0][1][1] + r).abs() < 1e-12);
        assert!((gr[1][0][1] - 1.0 / r).abs() < 1e-12);
        assert!((gr[1][2][2] + th.sin() * th.cos()).abs() < 1e-12);
    }

    #[test]
    fn flat_interior_chart_has_no_christoffels() {
        // Cartesian coordinates are not representable in the collar form, so
        // check the flat torus link directly: its chart Christoffels vanish.
        let (_, dg) = link_metric(Link::Torus, [0.3, 0.2]);
        assert!(dg[0].norm() == 0.0 && dg[1].norm() == 0.0);
    }

    #[test]
    fn christoffel_orders_near_boundary() {
        let spec = perturbed_torus(0.4);
        let mut prev = None;
        for k in 2..16 {
            let x = 0.5 * 2f64.powi(-k);
            let m = metric_at(&spec, x, [0.9, 1.7]).unwrap();
            let a = (m.gamma[0][0][0] * x).abs();
            let b = (m.gamma[1][1][0] * x).abs() + (m.gamma[2][2][0] * x).abs();
            let c = (m.gamma[1][1][1]).abs() + (m.gamma[2][1][2]).abs();
            assert!(a < 3.0 && b < 3.0 && c < 5.0, "x = {x}: {a} {b} {c}");
            prev = Some((a, b, c));
        }
        assert!(prev.is_some());
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        let spec = perturbed_sphere(0.3);
        let chart = Chart::adapted(Vector3::new(0.2, 0.9, 0.1).normalize(), Vector3::new(1.0, 0.0, 0.3));
        let (x, y) = (0.13, [1.1, 0.7]);
        let (_, d) = gtilde_jet(&spec, &chart, x, y);
        let e = 1e-6;
        let fd = |c: usize| {
            let (mut xp, mut yp, mut xm, mut ym) = (x, y, x, y);
            if c == 0 {
                xp += e;
                xm -= e;
            } else {
                yp[c - 1] += e;
                ym[c - 1] -= e;
            }
            (gtilde_jet(&spec, &chart, xp, yp).0 - gtilde_jet(&spec, &chart, xm, ym).0) / (2.0 * e)
        };
        for c in 0..3 {
            assert!((fd(c) - d[c]).norm() < 1e-7, "component {c}");
        }
    }

    #[test]
    fn frame_weights_regimes() {
        let spec = MetricSpec::cone(0.5, Link::Torus);
        let h = 0.01;
        let x = 0.05;
        let w = frame_weights(&spec, x, h).unwrap();
        assert!((w.wx * h * x.powi(3) - 1.0).abs() < 1e-12);
        assert!((w.wy * h.sqrt() * x - 1.0).abs() < 1e-12);
        assert_eq!(w.regime, Regime::OneCusp);
        let w = frame_weights(&spec, 0.25, h).unwrap();
        assert!((w.wx * h - 1.0).abs() < 1e-12);
        let x = 0.45;
        let w = frame_weights(&spec, x, h).unwrap();
        assert!((w.wx * h * (0.5f64 - x).powi(2) - 1.0).abs() < 1e-12);
        assert_eq!(w.regime, Regime::Scattering);
        assert!(frame_weights(&spec, 0.1, 0.0).is_err());
    }

    #[test]
    fn frame_weights_sandwich_in_transition() {
        let spec = MetricSpec::cone(0.5, Link::Torus);
        let h = 0.05;
        let [b0, b1, b2, b3] = frame_breaks(spec.x0);
        for (lo, hi) in [(b0, b1), (b2, b3)] {
            let mid = 0.5 * (lo + hi);
            let a = frame_weights(&spec, lo, h).unwrap();
            let b = frame_weights(&spec, hi, h).unwrap();
            let m = frame_weights(&spec, mid, h).unwrap();
            assert!(m.wx >= a.wx.min(b.wx) && m.wx <= a.wx.max(b.wx));
            assert!(m.wy >= a.wy.min(b.wy) && m.wy <= a.wy.max(b.wy));
        }
    }
}
