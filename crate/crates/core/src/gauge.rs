//! Conjugated symmetric gradient `d = e^{−FΦ/h} d^s e^{FΦ/h}`, its exact
//! discrete adjoint `δ`, the Laplacian `Δ = δd` with Dirichlet conditions at
//! both ends of the collar, and the solenoidal projection.
//!
//! `d` is a sparse matrix on frame components: frame → coordinate components,
//! central differences in `q = ln x` and `y` (virtual neighbours hold the
//! Dirichlet value 0), the Christoffel and conjugation terms, symmetrization,
//! and back to frame components. `δ = W_{m−1}⁻¹ Dᵀ W_m` with `W` the diagonal
//! of the field inner product, so `⟨dv, f⟩ = ⟨v, δf⟩` holds to rounding.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sprs::{CsMat, TriMat};

use crate::error::{Error, Result};
use crate::field::{coord_to_frame, frame_to_coord, ncomp, phi_deriv_unchecked, random_unit, Conjugation, Grid, TensorField, PAIRS};
use crate::geometry::{metric_unchecked, Chart, Link, MetricSpec};
use crate::xray::{spmv, spmv_t};

/// Outcome of a conjugate-gradient solve.
#[derive(Clone, Debug, Default)]
pub struct SolveReport {
    pub iterations: usize,
    /// Relative residual `‖Δu − b‖/‖b‖` after every iteration (index 0 is
    /// the initial guess).
    pub history: Vec<f64>,
    pub converged: bool,
    /// CG step lengths and conjugation coefficients, for Lanczos estimates.
    pub(crate) alphas: Vec<f64>,
    pub(crate) betas: Vec<f64>,
}

impl SolveReport {
    pub fn residual(&self) -> f64 {
        self.history.last().copied().unwrap_or(0.0)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["iteration", "residual"]).map_err(csv_err)?;
        for (k, r) in self.history.iter().enumerate() {
            wr.write_record([k.to_string(), format!("{r:e}")]).map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Result of `project_solenoidal`: `f = s + p`, `p = d q`.
#[derive(Clone, Debug)]
pub struct Projection {
    pub s: TensorField,
    pub p: TensorField,
    pub q: TensorField,
    pub report: SolveReport,
}

/// Relative defects: `|⟨dv, w⟩ − ⟨v, δw⟩|/|⟨dv, w⟩|`, `‖δSf‖/‖f‖`,
/// `‖Sdv‖/‖v‖` and `‖SSf − Sf‖/‖f‖`.
#[derive(Clone, Debug)]
pub struct GaugeDiagnostics {
    pub tol: f64,
    pub adjointness: f64,
    pub solenoidal: f64,
    pub potential: f64,
    pub idempotence: f64,
    /// Solver history of the projection of `f`.
    pub solve: SolveReport,
}

impl GaugeDiagnostics {
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "tol = {:e}", self.tol)?;
        writeln!(w, "adjointness = {:e}", self.adjointness)?;
        writeln!(w, "solenoidal_defect = {:e}", self.solenoidal)?;
        writeln!(w, "potential_leak = {:e}", self.potential)?;
        writeln!(w, "idempotence_defect = {:e}", self.idempotence)?;
        writeln!(w, "projection_iterations = {}", self.solve.iterations)?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GaugeOperators {
    pub grid: Arc<Grid>,
    /// Rank `m` of the output of `d` (1 or 2).
    pub rank: usize,
    pub f: f64,
    pub h: f64,
    d: CsMat<f64>,
    w_in: Vec<f64>,
    w_out: Vec<f64>,
    pub max_iter: usize,
    lambda_min: std::sync::OnceLock<f64>,
}

impl GaugeOperators {
    pub fn new(spec: &MetricSpec, grid: Arc<Grid>, rank: usize, f: f64, h: f64) -> Result<GaugeOperators> {
        if !(1..=2).contains(&rank) {
            return Err(Error::Unsupported(format!("gauge operators into rank {rank}")));
        }
        if !(h > 0.0) || !(f >= 0.0) {
            return Err(Error::Parameter(format!("need h > 0 and F ≥ 0, got h = {h}, F = {f}")));
        }
        if spec.link != Link::Torus || grid.link != Link::Torus {
            return Err(Error::Unsupported("gauge operators are built on torus grids".into()));
        }
        if (grid.x0 - spec.x0).abs() > 1e-15 || (grid.p - spec.p_exponent).abs() > 1e-15 {
            return Err(Error::Shape("grid and metric disagree on x0 or p".into()));
        }
        let d = assemble_d(spec, &grid, rank, f, h)?;
        Ok(GaugeOperators {
            w_in: grid.dof_weights(rank - 1),
            w_out: grid.dof_weights(rank),
            grid,
            rank,
            f,
            h,
            d,
            max_iter: 5000,
            lambda_min: std::sync::OnceLock::new(),
        })
    }

    /// The sparse matrix of `d` on frame components.
    pub fn d_matrix(&self) -> &CsMat<f64> {
        &self.d
    }

    fn check(&self, v: &TensorField, rank: usize) -> Result<()> {
        if v.rank != rank || *v.grid != *self.grid {
            return Err(Error::Shape(format!("expected a rank-{rank} field on the operator grid, got rank {}", v.rank)));
        }
        if v.state != Conjugation::Weighted {
            return Err(Error::State(format!("gauge operators act on weighted fields, got {:?}", v.state)));
        }
        Ok(())
    }

    fn out(&self, rank: usize, data: Vec<f64>) -> Result<TensorField> {
        TensorField::from_data(self.grid.clone(), rank, self.f, self.h, data)
    }

    /// `d v` for `v` of rank `m − 1`.
    pub fn dsym(&self, v: &TensorField) -> Result<TensorField> {
        self.check(v, self.rank - 1)?;
        let mut y = vec![0.0; self.d.rows()];
        spmv(&self.d, &v.data, &mut y);
        self.out(self.rank, y)
    }

    /// `δ f` for `f` of rank `m`: the exact weighted transpose of `d`.
    pub fn ddiv(&self, f: &TensorField) -> Result<TensorField> {
        self.check(f, self.rank)?;
        let wf: Vec<f64> = f.data.iter().zip(&self.w_out).map(|(a, w)| a * w).collect();
        let mut y = vec![0.0; self.d.cols()];
        spmv_t(&self.d, &wf, &mut y);
        y.iter_mut().zip(&self.w_in).for_each(|(a, w)| *a /= w);
        self.out(self.rank - 1, y)
    }

    pub fn laplacian(&self, u: &TensorField) -> Result<TensorField> {
        self.ddiv(&self.dsym(u)?)
    }

    fn lap_raw(&self, u: &[f64], tmp: &mut [f64], out: &mut [f64]) {
        spmv(&self.d, u, tmp);
        tmp.iter_mut().zip(&self.w_out).for_each(|(a, w)| *a *= w);
        spmv_t(&self.d, tmp, out);
        out.iter_mut().zip(&self.w_in).for_each(|(a, w)| *a /= w);
    }

    fn dot(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).zip(&self.w_in).map(|((x, y), w)| x * y * w).sum()
    }

    /// Conjugate gradients for `Δu = rhs` in the weighted inner product, in
    /// which `Δ` is symmetric positive definite.
    pub fn laplacian_solve(&self, rhs: &TensorField, tol: f64) -> Result<(TensorField, SolveReport)> {
        self.check(rhs, self.rank - 1)?;
        if !(tol >= 1e-12) {
            return Err(Error::Parameter(format!("tol = {tol} below 1e-12")));
        }
        if rhs.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite right-hand side".into()));
        }
        let (u, rep) = self.cg(&rhs.data, tol, self.max_iter);
        if !rep.converged {
            return Err(Error::Numerical(format!(
                "CG stagnated after {} iterations at relative residual {:.3e} (target {tol:e})",
                rep.iterations,
                rep.residual()
            )));
        }
        Ok((self.out(self.rank - 1, u)?, rep))
    }

    fn cg(&self, b: &[f64], tol: f64, max_iter: usize) -> (Vec<f64>, SolveReport) {
        self.cg_with(b, |_| tol, max_iter)
    }

    /// CG whose relative target may depend on the current iterate.
    fn cg_with<T: Fn(&[f64]) -> f64>(&self, b: &[f64], target: T, max_iter: usize) -> (Vec<f64>, SolveReport) {
        let n = b.len();
        let mut u = vec![0.0; n];
        let mut r = b.to_vec();
        let mut p = r.clone();
        let mut ap = vec![0.0; n];
        let mut tmp = vec![0.0; self.d.rows()];
        let bn = self.dot(b, b).sqrt();
        let mut rep = SolveReport { history: vec![if bn > 0.0 { 1.0 } else { 0.0 }], ..Default::default() };
        if bn == 0.0 {
            rep.converged = true;
            return (u, rep);
        }
        let mut rr = self.dot(&r, &r);
        for it in 1..=max_iter {
            self.lap_raw(&p, &mut tmp, &mut ap);
            let pap = self.dot(&p, &ap);
            if !(pap > 0.0) {
                break;
            }
            let alpha = rr / pap;
            u.iter_mut().zip(&p).for_each(|(a, b)| *a += alpha * b);
            r.iter_mut().zip(&ap).for_each(|(a, b)| *a -= alpha * b);
            let rr_new = self.dot(&r, &r);
            let beta = rr_new / rr;
            rep.alphas.push(alpha);
            rep.betas.push(beta);
            rep.history.push(rr_new.sqrt() / bn);
            rep.iterations = it;
            rr = rr_new;
            let tol = target(&u);
            if rr.sqrt() <= tol * bn {
                // recompute the true residual to guard against drift
                self.lap_raw(&u, &mut tmp, &mut ap);
                let true_r: Vec<f64> = b.iter().zip(&ap).map(|(a, c)| a - c).collect();
                let tr = self.dot(&true_r, &true_r).sqrt() / bn;
                *rep.history.last_mut().unwrap() = tr;
                if tr <= tol {
                    rep.converged = true;
                    break;
                }
                r = true_r;
                rr = self.dot(&r, &r);
                p.copy_from_slice(&r);
                continue;
            }
            p.iter_mut().zip(&r).for_each(|(a, b)| *a = b + beta * *a);
        }
        (u, rep)
    }

    /// `(Sf, Pf, Qf)` with `Qf = Δ⁻¹δf`, `Pf = dQf`, `Sf = f − Pf`.
    ///
    /// The solve stops once `‖δSf‖ = ‖δf − ΔQf‖ ≤ tol·min(‖δf‖, ‖f‖, √λ_min·m)`
    /// with `m = min(‖f‖, max(‖Qf‖, tol‖f‖))`. Since `‖d(Qf − Q*f)‖ ≤
    /// ‖δSf‖/√λ_min`, the error of `Sf` is at most `tol·m`; the `‖Qf‖` term
    /// keeps `S dv` small relative to `v` rather than to `dv`.
    pub fn project_solenoidal(&self, f: &TensorField, tol: f64) -> Result<Projection> {
        self.check(f, self.rank)?;
        if !(tol >= 1e-12) {
            return Err(Error::Parameter(format!("tol = {tol} below 1e-12")));
        }
        let b = self.ddiv(f)?;
        let bn = b.norm();
        let fnorm = f.norm();
        if !bn.is_finite() || !fnorm.is_finite() {
            return Err(Error::Numerical("non-finite field".into()));
        }
        let sl = self.lambda_min()?.sqrt();
        let rel = |u: &[f64]| {
            if bn == 0.0 {
                return tol;
            }
            let m = fnorm.min(self.dot(u, u).sqrt().max(tol * fnorm));
            tol * (fnorm.min(sl * m) / bn).min(1.0)
        };
        let (q, report) = self.cg_with(&b.data, rel, self.max_iter);
        if !report.converged {
            return Err(Error::Numerical(format!(
                "projection CG stopped after {} iterations at relative residual {:.3e} (target {:.3e})",
                report.iterations,
                report.residual(),
                rel(&q)
            )));
        }
        let q = self.out(self.rank - 1, q)?;
        let p = self.dsym(&q)?;
        let s = f.sub(&p)?;
        Ok(Projection { s, p, q, report })
    }

    /// Lower estimate of the smallest eigenvalue of `Δ`: half the smallest
    /// Ritz value of a long Lanczos run, computed once.
    pub fn lambda_min(&self) -> Result<f64> {
        if let Some(v) = self.lambda_min.get() {
            return Ok(*v);
        }
        let n = self.d.cols();
        let (lo, _) = self.spectrum_estimate(n.min(400), 0x5eed)?;
        if !(lo > 0.0) {
            return Err(Error::Numerical(format!("non-positive Ritz value {lo:e}")));
        }
        Ok(*self.lambda_min.get_or_init(|| 0.5 * lo))
    }

    /// Extreme eigenvalues of `Δ` from the Lanczos tridiagonal of a CG run on
    /// a random right-hand side; returns `(λ_min, λ_max)`.
    pub fn spectrum_estimate(&self, iterations: usize, seed: u64) -> Result<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<f64> = (0..self.d.cols()).map(|_| random_unit(&mut rng)).collect();
        let (_, rep) = self.cg(&b, 1e-14, iterations);
        let k = rep.alphas.len();
        if k == 0 {
            return Err(Error::Numerical("no CG iterations".into()));
        }
        let mut t = DMatrix::zeros(k, k);
        for j in 0..k {
            t[(j, j)] = 1.0 / rep.alphas[j] + if j > 0 { rep.betas[j - 1] / rep.alphas[j - 1] } else { 0.0 };
            if j + 1 < k {
                let off = rep.betas[j].sqrt() / rep.alphas[j];
                t[(j, j + 1)] = off;
                t[(j + 1, j)] = off;
            }
        }
        let e = SymmetricEigen::new(t).eigenvalues;
        Ok((e.min(), e.max()))
    }

    /// Algebraic checks of `d`, `δ` and `S` on random smooth fields.
    pub fn diagnostics(&self, tol: f64, seed: u64) -> Result<GaugeDiagnostics> {
        let g = self.grid.clone();
        let v = TensorField::random_smooth(g.clone(), self.rank - 1, self.f, self.h, seed)?;
        let w = TensorField::random_smooth(g.clone(), self.rank, self.f, self.h, seed + 1)?;
        let f = TensorField::random_smooth(g, self.rank, self.f, self.h, seed + 2)?;
        let a = self.dsym(&v)?.inner(&w);
        let b = v.inner(&self.ddiv(&w)?);
        let adjointness = (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE);
        let pr = self.project_solenoidal(&f, tol)?;
        let solenoidal = self.ddiv(&pr.s)?.norm() / f.norm();
        let idempotence = self.project_solenoidal(&pr.s, tol)?.s.sub(&pr.s)?.norm() / f.norm();
        let potential = self.project_solenoidal(&self.dsym(&v)?, tol)?.s.norm() / v.norm();
        Ok(GaugeDiagnostics { tol, adjointness, solenoidal, potential, idempotence, solve: pr.report })
    }

    pub fn condition_estimate(&self, iterations: usize, seed: u64) -> Result<f64> {
        let (lo, hi) = self.spectrum_estimate(iterations, seed)?;
        Ok(hi / lo)
    }

    /// Smallest Rayleigh quotient `⟨Δu, u⟩/‖u‖²` over random smooth fields.
    pub fn rayleigh_floor(&self, samples: usize, seed: u64) -> Result<f64> {
        let mut best = f64::INFINITY;
        for s in 0..samples {
            let u = TensorField::random_smooth(self.grid.clone(), self.rank - 1, self.f, self.h, seed + s as u64)?;
            let du = self.dsym(&u)?;
            best = best.min(du.inner(&du) / u.inner(&u));
        }
        Ok(best)
    }
}

/// Linear maps between frame and coordinate components at `x`, as matrices
/// acting on component vectors.
fn conversions(grid: &Grid, rank: usize, x: f64, h: f64) -> (Vec<f64>, Vec<f64>) {
    let fw = grid.frame(x, h);
    let nc = ncomp(rank);
    let mut f2c = vec![0.0; nc];
    let mut c2f = vec![0.0; nc];
    let ones = [1.0; 6];
    frame_to_coord(rank, &fw, &ones, &mut f2c);
    coord_to_frame(rank, &fw, &ones, &mut c2f);
    (f2c, c2f)
}

/// Neighbour of node `(i, j, k)` along `axis` at offset `s` (±1), or `None`
/// for a Dirichlet virtual node.
fn neighbour(grid: &Grid, (i, j, k): (usize, usize, usize), axis: usize, s: isize) -> Option<usize> {
    let idx = [i as isize, j as isize, k as isize];
    let n = [grid.nx as isize, grid.ny[0] as isize, grid.ny[1] as isize];
    let mut t = idx;
    t[axis] += s;
    if axis > 0 && grid.periodic {
        t[axis] = t[axis].rem_euclid(n[axis]);
    } else if t[axis] < 0 || t[axis] >= n[axis] {
        return None;
    }
    Some(grid.index(t[0] as usize, t[1] as usize, t[2] as usize))
}

fn assemble_d(spec: &MetricSpec, grid: &Grid, rank: usize, f: f64, h: f64) -> Result<CsMat<f64>> {
    let nin = ncomp(rank - 1);
    let nout = ncomp(rank);
    let chart = Chart::default();
    let mut tri = TriMat::new((grid.len() * nout, grid.len() * nin));
    for n in 0..grid.len() {
        let (i, j, k) = grid.unindex(n);
        let (x, y) = grid.node(n);
        let (f2c_here, _) = conversions(grid, rank - 1, x, h);
        let (_, c2f_out) = conversions(grid, rank, x, h);
        let m = metric_unchecked(spec, &chart, x, y)?;
        let conj = f / h * phi_deriv_unchecked(x, spec.x0);
        // coordinate derivative stencils: (neighbour, axis, coefficient)
        let inv = [1.0 / (2.0 * grid.dq * x), 1.0 / (2.0 * grid.dy[0]), 1.0 / (2.0 * grid.dy[1])];
        let mut stencil: Vec<(usize, usize, f64, f64)> = Vec::with_capacity(6);
        for axis in 0..3 {
            for s in [-1isize, 1] {
                if let Some(nb) = neighbour(grid, (i, j, k), axis, s) {
                    let xb = grid.x_at(grid.unindex(nb).0);
                    stencil.push((nb, axis, s as f64 * inv[axis], xb));
                }
            }
        }
        // out_coord[c] = Σ coef · in_coord, collected per (input node, input comp)
        let mut add = |row_c: usize, col_node: usize, col_b: usize, coef_coord: f64, f2c: f64| {
            let v = c2f_out[row_c] * coef_coord * f2c;
            if v != 0.0 {
                tri.add_triplet(n * nout + row_c, col_node * nin + col_b, v);
            }
        };
        match rank {
            1 => {
                for &(nb, axis, c, xb) in &stencil {
                    let (f2c_nb, _) = conversions(grid, 0, xb, h);
                    add(axis, nb, 0, c, f2c_nb[0]);
                }
                add(0, n, 0, conj, f2c_here[0]);
            }
            _ => {
                for (pc, &(a, b)) in PAIRS.iter().enumerate() {
                    // ½(∂_b v_a + ∂_a v_b)
                    for &(nb, axis, c, xb) in &stencil {
                        let (f2c_nb, _) = conversions(grid, 1, xb, h);
                        if axis == b {
                            add(pc, nb, a, 0.5 * c, f2c_nb[a]);
                        }
                        if axis == a {
                            add(pc, nb, b, 0.5 * c, f2c_nb[b]);
                        }
                    }
                    // −Γ^d_{ab} v_d
                    for dd in 0..3 {
                        add(pc, n, dd, -m.gamma[dd][a][b], f2c_here[dd]);
                    }
                    // conjugation: (F/h)Φ′ (dx ⊙ v)_{ab}
                    if a == 0 {
                        add(pc, n, b, 0.5 * conj, f2c_here[b]);
                    }
                    if b == 0 {
                        add(pc, n, a, 0.5 * conj, f2c_here[a]);
                    }
                }
            }
        }
    }
    Ok(tri.to_csr())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::MetricSpec;

    fn setup(rank: usize, f: f64, h: f64, n: usize) -> GaugeOperators {
        let spec = MetricSpec::cone(0.5, Link::Torus);
        let g = Arc::new(Grid::torus(0.5, n, n, n).unwrap());
        GaugeOperators::new(&spec, g, rank, f, h).unwrap()
    }

    #[test]
    fn adjointness_is_exact() {
        for rank in 1..=2 {
            let op = setup(rank, 1.0, 0.1, 8);
            for s in 0..20 {
                let v = TensorField::random_smooth(op.grid.clone(), rank - 1, 1.0, 0.1, s).unwrap();
                let w = TensorField::random_smooth(op.grid.clone(), rank, 1.0, 0.1, 100 + s).unwrap();
                let a = op.dsym(&v).unwrap().inner(&w);
                let b = v.inner(&op.ddiv(&w).unwrap());
                assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn constant_scalar_has_zero_gradient_without_weight() {
        // interior rows of d(const) vanish at F = 0 in the y directions and
        // in x away from the Dirichlet ends
        let op = setup(1, 0.0, 0.1, 8);
        let mut v = TensorField::zeros(op.grid.clone(), 0, 0.0, 0.1).unwrap();
        v.data.iter_mut().for_each(|a| *a = 1.0);
        let dv = op.dsym(&v).unwrap();
        for n in 0..op.grid.len() {
            let (i, _, _) = op.grid.unindex(n);
            let c = dv.at(n);
            assert!(c[1].abs() < 1e-12 && c[2].abs() < 1e-12);
            if i > 0 && i + 1 < op.grid.nx {
                assert!(c[0].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conjugated_gradient_matches_conjugate_then_differentiate() {
        // scalar v: d_F v − d_0 v = (F/h)Φ′ v dx in the dx slot
        let spec = MetricSpec::cone(0.5, Link::Torus);
        let g = Arc::new(Grid::torus(0.5, 8, 8, 8).unwrap());
        let d0 = GaugeOperators::new(&spec, g.clone(), 1, 0.0, 0.1).unwrap();
        let d1 = GaugeOperators::new(&spec, g.clone(), 1, 2.0, 0.1).unwrap();
        let v = TensorField::random_smooth(g.clone(), 0, 2.0, 0.1, 3).unwrap();
        let mut v0 = v.clone();
        v0.f = 0.0;
        let a = d1.dsym(&v).unwrap();
        let b = d0.dsym(&v0).unwrap();
        for n in 0..g.len() {
            let (x, _) = g.node(n);
            let fw = g.frame(x, 0.1);
            let expect = 2.0 / 0.1 * phi_deriv_unchecked(x, 0.5) * v.data[n] / fw.wx;
            assert!((a.at(n)[0] - b.at(n)[0] - expect).abs() < 1e-10 * (1.0 + expect.abs()));
            assert_eq!(a.at(n)[1], b.at(n)[1]);
        }
    }

    #[test]
    fn gradient_matches_analytic_one_form() {
        // v = sin(y1)·b(x): coordinate gradient (b′ sin, b cos, 0)
        let spec = MetricSpec::cone(0.5, Link::Torus);
        let g = Arc::new(Grid::torus(0.5, 200, 64, 4).unwrap());
        let op = GaugeOperators::new(&spec, g.clone(), 1, 0.0, 0.1).unwrap();
        let b = |x: f64| ((x - 0.2) / 0.05).powi(2).neg_exp();
        let db = |x: f64| -2.0 * (x - 0.2) / 0.0025 * b(x);
        let mut v = TensorField::zeros(g.clone(), 0, 0.0, 0.1).unwrap();
        for n in 0..g.len() {
            let (x, y) = g.node(n);
            v.data[n] = b(x) * y[0].sin();
        }
        let dv = op.dsym(&v).unwrap();
        let mut err: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for n in 0..g.len() {
            let (x, y) = g.node(n);
            let fw = g.frame(x, 0.1);
            let ex = [db(x) * y[0].sin() / fw.wx, b(x) * y[0].cos() / fw.wy, 0.0];
            for c in 0..3 {
                err = err.max((dv.at(n)[c] - ex[c]).abs());
                scale = scale.max(ex[c].abs());
            }
        }
        assert!(err < 5e-3 * scale, "{err} vs {scale}");
    }

    trait NegExp {
        fn neg_exp(self) -> f64;
    }
    impl NegExp for f64 {
        fn neg_exp(self) -> f64 {
            (-self).exp()
        }
    }

    #[test]
    fn laplacian_is_positive_and_solves() {
        for rank in 1..=2 {
            let op = setup(rank, 1.0, 0.1, 8);
            let u0 = TensorField::random_smooth(op.grid.clone(), rank - 1, 1.0, 0.1, 9).unwrap();
            let rhs = op.laplacian(&u0).unwrap();
            assert!(rhs.inner(&u0) > 0.0);
            let tol = 1e-10;
            let (u, rep) = op.laplacian_solve(&rhs, tol).unwrap();
            assert!(rep.converged && rep.residual() <= tol);
            let e = u.sub(&u0).unwrap().norm() / u0.norm();
            assert!(e < 1e-6, "rank {rank}: {e}");
            let mut buf = Vec::new();
            rep.write_csv(&mut buf).unwrap();
            assert!(String::from_utf8(buf).unwrap().starts_with("iteration,residual"));
        }
    }

    #[test]
    fn diagnostics_meet_the_tolerance_bounds() {
        let tol = 1e-10;
        for rank in 1..=2 {
            let d = setup(rank, 1.0, 0.1, 8).diagnostics(tol, 3).unwrap();
            assert!(d.adjointness <= 1e-12, "{d:?}");
            assert!(d.solenoidal <= 10.0 * tol && d.potential <= 10.0 * tol && d.idempotence <= 20.0 * tol, "{d:?}");
        }
    }

    #[test]
    fn projections_are_consistent() {
        let tol = 1e-10;
        for rank in 1..=2 {
            let op = setup(rank, 1.0, 0.1, 8);
            let f = TensorField::random_smooth(op.grid.clone(), rank, 1.0, 0.1, 5).unwrap();
            let pr = op.project_solenoidal(&f, tol).unwrap();
            let mut sum = pr.s.clone();
            sum.axpy(1.0, &pr.p).unwrap();
            assert!(sum.sub(&f).unwrap().norm() <= 1e-14 * f.norm());
            assert!(op.ddiv(&pr.s).unwrap().norm() <= 10.0 * tol * op.ddiv(&f).unwrap().norm().max(f.norm()));
            let ss = op.project_solenoidal(&pr.s, tol).unwrap().s;
            assert!(ss.sub(&pr.s).unwrap().norm() <= 20.0 * tol * f.norm());
            let v = TensorField::random_smooth(op.grid.clone(), rank - 1, 1.0, 0.1, 6).unwrap();
            let dv = op.dsym(&v).unwrap();
            let sdv = op.project_solenoidal(&dv, tol).unwrap().s;
            assert!(sdv.norm() <= 10.0 * tol * dv.norm().max(v.norm()), "{}", sdv.norm());
        }
    }

    fn patch_ops(rank: usize, f: f64) -> GaugeOperators {
        // 1c patch at x = 0.1 with cells of a quarter frame unit
        let (h, x): (f64, f64) = (0.05, 0.1);
        let spec = MetricSpec::cone(0.5, Link::Torus);
        let dq = 0.25 * h * x * x;
        let dy = 0.25 * h.sqrt() * x;
        let g = Arc::new(Grid::patch(0.5, x, [0.0, 0.0], [12, 12, 12], dq, [dy, dy]).unwrap());
        GaugeOperators::new(&spec, g, rank, f, h).unwrap()
    }

    #[test]
    fn conditioning_improves_with_f() {
        for rank in 1..=2 {
            let c1 = patch_ops(rank, 1.0).condition_estimate(400, 1).unwrap();
            let c10 = patch_ops(rank, 10.0).condition_estimate(400, 1).unwrap();
            assert!(c10 < 0.5 * c1, "rank {rank}: {c1} → {c10}");
            let r1 = patch_ops(rank, 1.0).rayleigh_floor(4, 1).unwrap();
            let r10 = patch_ops(rank, 10.0).rayleigh_floor(4, 1).unwrap();
            assert!(r1 > 0.0 && r10 > r1);
        }
    }

    #[test]
    fn lanczos_estimate_brackets_rayleigh_quotients() {
        let op = setup(1, 1.0, 0.1, 6);
        let (lo, hi) = op.spectrum_estimate(500, 2).unwrap();
        let r = op.rayleigh_floor(6, 3).unwrap();
        assert!(lo <= r * (1.0 + 1e-9) && r <= hi);
    }

    #[test]
    fn rejects_bad_inputs() {
        let op = setup(1, 1.0, 0.1, 4);
        let v = TensorField::zeros(op.grid.clone(), 1, 1.0, 0.1).unwrap();
        assert!(op.dsym(&v).is_err());
        let mut s = TensorField::zeros(op.grid.clone(), 0, 1.0, 0.1).unwrap();
        s.state = Conjugation::Plain;
        assert!(op.dsym(&s).is_err());
        let spec = MetricSpec::cone(0.5, Link::Torus);
        assert!(GaugeOperators::new(&spec, op.grid.clone(), 3, 1.0, 0.1).is_err());
    }
}
