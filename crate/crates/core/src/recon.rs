//! Combined operator `A = N + d M δ`, its least-squares inversion and the
//! end-to-end recovery experiment.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use sprs::{CsMat, TriMat};

use crate::error::{Error, Result};
use crate::field::{ncomp, Grid, TensorField};
use crate::gauge::GaugeOperators;
use crate::geometry::MetricSpec;
use crate::xray::{apply_path, spmv, FanOptions, FanStats, NormalOperator};

/// Solver tolerance used for gauge projections inside the experiment.
pub const PROJECTION_TOL: f64 = 1e-11;

/// Discrete diffusion step `S = I − W⁻¹L` on fields of one rank, acting
/// componentwise. `L` is the graph Laplacian of the grid with edge weights
/// `min(μ_n, μ_m)/16`, so `W⁻¹L` has spectrum in `[0, 3/4]` and `S` is
/// `W`-self-adjoint with spectrum in `[1/4, 1]`.
#[derive(Clone, Debug)]
pub struct Smoother {
    pub grid: Arc<Grid>,
    pub rank: usize,
    step: CsMat<f64>,
}

impl Smoother {
    pub fn new(grid: Arc<Grid>, rank: usize) -> Smoother {
        let nc = ncomp(rank);
        let mu: Vec<f64> = (0..grid.nx).map(|i| grid.measure(i)).collect();
        let n = grid.len();
        let mut tri = TriMat::new((n * nc, n * nc));
        for node in 0..n {
            let (i, j, k) = grid.unindex(node);
            let mut diag = 1.0;
            let mut nbrs: Vec<(usize, f64)> = Vec::with_capacity(6);
            let idx = [i as isize, j as isize, k as isize];
            let dims = [grid.nx as isize, grid.ny[0] as isize, grid.ny[1] as isize];
            for axis in 0..3 {
                for s in [-1isize, 1] {
                    let mut t = idx;
                    t[axis] += s;
                    if axis > 0 && grid.periodic {
                        t[axis] = t[axis].rem_euclid(dims[axis]);
                    } else if t[axis] < 0 || t[axis] >= dims[axis] {
                        continue;
                    }
                    let m = grid.index(t[0] as usize, t[1] as usize, t[2] as usize);
                    if m == node {
                        continue;
                    }
                    let c = mu[i].min(mu[t[0] as usize]) / 16.0 / mu[i];
                    diag -= c;
                    nbrs.push((m, c));
                }
            }
            for a in 0..nc {
                tri.add_triplet(node * nc + a, node * nc + a, diag);
                for &(m, c) in &nbrs {
                    tri.add_triplet(node * nc + a, m * nc + a, c);
                }
            }
        }
        Smoother { grid, rank, step: tri.to_csr() }
    }

    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        spmv(&self.step, v, out);
    }
}

/// `A = N + d M δ` with `M = m0·S³`.
#[derive(Clone, Debug)]
pub struct CombinedOperator {
    pub normal: NormalOperator,
    pub gauge: GaugeOperators,
    pub smoother: Smoother,
    pub m0: f64,
    /// Use the diagonal scalings in `invert`.
    pub equilibrate: bool,
    pub col_scale: Vec<f64>,
    pub row_weight: Vec<f64>,
    weights: Vec<f64>,
}

/// Build `A_{h,F}`; the operators must share grid, rank, `F` and `h`.
pub fn assemble_a(normal: NormalOperator, gauge: GaugeOperators, m0: f64) -> Result<CombinedOperator> {
    if !(m0 > 0.0) || !m0.is_finite() {
        return Err(Error::Parameter(format!("m0 = {m0} must be positive")));
    }
    if normal.rank != gauge.rank || *normal.grid != *gauge.grid {
        return Err(Error::Shape(format!("N has rank {} but the gauge operators have rank {}", normal.rank, gauge.rank)));
    }
    if normal.f != gauge.f || normal.h != gauge.h {
        return Err(Error::Shape("N and the gauge operators disagree on F or h".into()));
    }
    let smoother = Smoother::new(gauge.grid.clone(), gauge.rank - 1);
    let weights = gauge.grid.dof_weights(gauge.rank);
    let (col_scale, row_weight) = equilibration(&normal);
    Ok(CombinedOperator { normal, gauge, smoother, m0, equilibrate: true, col_scale, row_weight, weights })
}

impl CombinedOperator {
    pub fn rank(&self) -> usize {
        self.normal.rank
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.normal.grid
    }

    pub fn dim(&self) -> usize {
        self.normal.dim()
    }

    /// `M v = m0·S³ v`.
    pub fn smooth(&self, v: &TensorField) -> Result<TensorField> {
        let mut a = v.data.clone();
        let mut b = vec![0.0; a.len()];
        for _ in 0..3 {
            self.smoother.apply(&a, &mut b);
            std::mem::swap(&mut a, &mut b);
        }
        a.iter_mut().for_each(|t| *t *= self.m0);
        TensorField::from_data(v.grid.clone(), v.rank, v.f, v.h, a)
    }

    /// The gauge term `d M δ f`.
    pub fn gauge_term(&self, f: &TensorField) -> Result<TensorField> {
        self.gauge.dsym(&self.smooth(&self.gauge.ddiv(f)?)?)
    }

    pub fn apply(&self, f: &TensorField) -> Result<TensorField> {
        let mut out = self.normal.apply(f)?;
        out.axpy(1.0, &self.gauge_term(f)?)?;
        Ok(out)
    }

    /// Adjoint in the weighted inner product: `A* = W⁻¹AᵀW`. The gauge term
    /// is self-adjoint, so only `N` needs transposing.
    pub fn apply_adjoint(&self, f: &TensorField) -> Result<TensorField> {
        let mut wf = f.clone();
        wf.data.iter_mut().zip(&self.weights).for_each(|(a, w)| *a *= w);
        let mut out = self.normal.apply_transpose(&wf)?;
        out.data.iter_mut().zip(&self.weights).for_each(|(a, w)| *a /= w);
        out.axpy(1.0, &self.gauge_term(f)?)?;
        Ok(out)
    }
}

/// `m0` that puts the gauge term on the scale of `N` in the coordinates
/// `invert` works in: the ratio of `‖R^{1/2} N C s‖/‖s‖` on a smooth gauged
/// `s` to `‖R^{1/2} d S³ δ C z‖/‖z‖` with `C z` a smooth potential.
pub fn balanced_m0(a: &CombinedOperator, seed: u64) -> Result<f64> {
    let gauge = &a.gauge;
    let ones = vec![1.0; a.dim()];
    let (col, row) = if a.equilibrate { (&a.col_scale, &a.row_weight) } else { (&ones, &ones) };
    let rnorm = |x: &TensorField| -> f64 {
        x.data.iter().zip(&a.weights).zip(row.iter()).map(|((p, w), r)| p * p * w * r).sum::<f64>().sqrt()
    };
    let with = |x: &TensorField, d: &[f64], inv: bool| {
        let mut y = x.clone();
        y.data.iter_mut().zip(d).for_each(|(t, s)| if inv { *t /= s } else { *t *= s });
        y
    };
    let s = gauged_field(gauge, seed)?;
    let ns = rnorm(&a.normal.apply(&with(&s, col, false))?) / s.norm();
    let v = TensorField::random_smooth(gauge.grid.clone(), gauge.rank - 1, gauge.f, gauge.h, seed + 1)?;
    let z = with(&gauge.dsym(&v)?, col, true);
    let gd = rnorm(&a.gauge_term(&with(&z, col, false))?) / a.m0 / z.norm();
    let m0 = ns / gd;
    if !(m0 > 0.0) || !m0.is_finite() {
        return Err(Error::Numerical(format!("cannot balance m0: N scale {ns:e}, gauge scale {gd:e}")));
    }
    Ok(m0)
}

/// Outcome of `invert`.
#[derive(Clone, Debug, Default)]
pub struct InvertReport {
    pub iterations: usize,
    /// Relative data residual `‖b − Au‖/‖b‖` per iteration, in the
    /// residual norm of the solve (non-increasing).
    pub history: Vec<f64>,
    /// Relative normal-equation residual `‖A*(b − Au)‖/‖A*b‖` per iteration.
    pub normal_history: Vec<f64>,
    pub converged: bool,
}

impl InvertReport {
    pub fn residual(&self) -> f64 {
        self.normal_history.last().copied().unwrap_or(0.0)
    }
}

/// Diagonal equilibration of `N` in the weighted norms, constant on each
/// `x` level: `col = c^{−1/2}` and `row = r^{−1}` with `c`, `r` the geometric
/// means over the level of the column and row norms. Level-constant scalings
/// leave the `y` structure of the problem alone and only undo the radial
/// spread of the row scale (the prefactors and frame weights vary by orders
/// of magnitude across the collar).
pub fn equilibration(normal: &NormalOperator) -> (Vec<f64>, Vec<f64>) {
    let g = &normal.grid;
    let w = g.dof_weights(normal.rank);
    let n = normal.dim();
    let mut col = vec![0.0; n];
    let mut row = vec![0.0; n];
    for (r, rv) in normal.matrix.outer_iterator().enumerate() {
        for (c, &v) in rv.iter() {
            col[c] += v * v * w[r] / w[c];
            row[r] += v * v * w[c] / w[r];
        }
    }
    let per = n / g.nx;
    let level = |x: &mut Vec<f64>| {
        let top = x.iter().cloned().fold(0.0f64, f64::max).sqrt();
        let floor = (1e-8 * top).max(f64::MIN_POSITIVE);
        for i in 0..g.nx {
            let r = i * per..(i + 1) * per;
            let m = (r.clone().map(|k| x[k].sqrt().max(floor).ln()).sum::<f64>() / per as f64).exp();
            r.for_each(|k| x[k] = m);
        }
    };
    level(&mut col);
    level(&mut row);
    (col.iter().map(|t| 1.0 / t.sqrt()).collect(), row.iter().map(|t| 1.0 / t).collect())
}

/// Solve the normal equations of `A` by CGLS in the weighted inner product.
/// With `a.equilibrate` the unknown is `u = C z` and the residual is measured
/// with extra weights `R`, the diagonal scalings from `equilibration`; for
/// consistent data the solution is unchanged. Running out of iterations is
/// not an error; the report carries the achieved residual.
pub fn invert(a: &CombinedOperator, data: &TensorField, tol: f64, max_iter: usize) -> Result<(TensorField, InvertReport)> {
    if !(tol > 0.0) {
        return Err(Error::Parameter(format!("tol = {tol} must be positive")));
    }
    if data.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite data".into()));
    }
    let ones = vec![1.0; a.dim()];
    let (col, row) = if a.equilibrate { (&a.col_scale, &a.row_weight) } else { (&ones, &ones) };
    let scaled = |x: &TensorField, d: &[f64]| {
        let mut y = x.clone();
        y.data.iter_mut().zip(d).for_each(|(t, s)| *t *= s);
        y
    };
    let op = |z: &TensorField| a.apply(&scaled(z, col));
    let adj = |r: &TensorField| -> Result<TensorField> { Ok(scaled(&a.apply_adjoint(&scaled(r, row))?, col)) };
    let rdot = |x: &TensorField, y: &TensorField| -> f64 {
        x.data.iter().zip(&y.data).zip(&a.weights).zip(row.iter()).map(|(((p, q), w), s)| p * q * w * s).sum()
    };
    let mut z = TensorField::zeros(data.grid.clone(), data.rank, data.f, data.h)?;
    let mut r = data.clone();
    let mut s = adj(&r)?;
    let bn = rdot(data, data).sqrt();
    let sn0 = s.inner(&s).sqrt();
    let mut rep = InvertReport::default();
    if bn == 0.0 || sn0 == 0.0 {
        rep.history.push(0.0);
        rep.normal_history.push(0.0);
        rep.converged = true;
        return Ok((z, rep));
    }
    rep.history.push(1.0);
    rep.normal_history.push(1.0);
    let mut p = s.clone();
    let mut gamma = s.inner(&s);
    for it in 1..=max_iter {
        let q = op(&p)?;
        let qq = rdot(&q, &q);
        if !(qq > 0.0) {
            break;
        }
        let alpha = gamma / qq;
        z.axpy(alpha, &p)?;
        r.axpy(-alpha, &q)?;
        s = adj(&r)?;
        let gamma_new = s.inner(&s);
        rep.iterations = it;
        rep.history.push(rdot(&r, &r).sqrt() / bn);
        rep.normal_history.push(gamma_new.sqrt() / sn0);
        if gamma_new.sqrt() <= tol * sn0 {
            rep.converged = true;
            break;
        }
        let beta = gamma_new / gamma;
        gamma = gamma_new;
        p.scale(beta);
        p.axpy(1.0, &s)?;
    }
    let u = scaled(&z, col);
    if u.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("CGLS produced non-finite iterates".into()));
    }
    Ok((u, rep))
}

/// Settings of one recovery experiment.
#[derive(Clone, Debug)]
pub struct ExperimentOptions {
    pub grid: [usize; 3],
    /// Gauge-term strength; `None` picks `balanced_m0`.
    pub m0: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
    /// Relative additive noise on the data (0 disables it).
    pub noise: f64,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        ExperimentOptions { grid: [24, 16, 16], m0: None, tol: 1e-8, max_iter: 400, noise: 0.0 }
    }
}

/// Residual curves, recovery error and gauge diagnostics of one run.
#[derive(Clone, Debug)]
pub struct ReconReport {
    pub rank: usize,
    pub f: f64,
    pub h: f64,
    pub grid: [usize; 3],
    pub grid_hash: String,
    pub seed: u64,
    pub m0: f64,
    pub tol: f64,
    pub iterations: usize,
    pub converged: bool,
    pub history: Vec<f64>,
    pub normal_history: Vec<f64>,
    /// `‖f_rec − f_true‖/‖f_true‖`.
    pub recovery_error: f64,
    /// Same error for the raw least-squares solution before projection.
    pub raw_error: f64,
    /// `‖δ f_rec‖/‖f_rec‖` and `‖δ f_true‖/‖f_true‖`.
    pub gauge_violation: f64,
    pub input_gauge_violation: f64,
    /// `‖N_path f − N_matrix f‖/‖N_matrix f‖`: the discretization gap
    /// between data and model.
    pub data_gap: f64,
    pub stats: FanStats,
    pub seconds: f64,
}

impl ReconReport {
    /// Key–value text, one `key = value` per line.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        let lines: Vec<(&str, String)> = vec![
            ("rank", self.rank.to_string()),
            ("F", format!("{}", self.f)),
            ("h", format!("{}", self.h)),
            ("grid", format!("{}x{}x{}", self.grid[0], self.grid[1], self.grid[2])),
            ("grid_hash", self.grid_hash.clone()),
            ("seed", self.seed.to_string()),
            ("m0", format!("{}", self.m0)),
            ("tol", format!("{:e}", self.tol)),
            ("iterations", self.iterations.to_string()),
            ("converged", self.converged.to_string()),
            ("final_residual", format!("{:e}", self.history.last().copied().unwrap_or(0.0))),
            ("final_normal_residual", format!("{:e}", self.normal_history.last().copied().unwrap_or(0.0))),
            ("recovery_error", format!("{:e}", self.recovery_error)),
            ("raw_error", format!("{:e}", self.raw_error)),
            ("gauge_violation", format!("{:e}", self.gauge_violation)),
            ("input_gauge_violation", format!("{:e}", self.input_gauge_violation)),
            ("data_gap", format!("{:e}", self.data_gap)),
            ("fan_max_exponent", format!("{}", self.stats.max_exponent)),
            ("fan_max_capped_fraction", format!("{}", self.stats.max_capped_fraction)),
            ("seconds", format!("{:.3}", self.seconds)),
        ];
        for (k, v) in lines {
            writeln!(w, "{k} = {v}")?;
        }
        Ok(())
    }

    /// Residual curves: `iteration,residual,normal_residual`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        wr.write_record(["iteration", "residual", "normal_residual"]).map_err(err)?;
        for (k, (r, n)) in self.history.iter().zip(&self.normal_history).enumerate() {
            wr.write_record([k.to_string(), format!("{r:e}"), format!("{n:e}")]).map_err(err)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Gauged random field of the given rank, the raw draw projected with `S`.
pub fn gauged_field(gauge: &GaugeOperators, seed: u64) -> Result<TensorField> {
    let raw = TensorField::random_smooth(gauge.grid.clone(), gauge.rank, gauge.f, gauge.h, seed)?;
    Ok(gauge.project_solenoidal(&raw, PROJECTION_TOL)?.s)
}

/// Draw a gauged field, generate data by transform-and-backproject, invert
/// `A` and compare. The least-squares solution is projected once with `S`
/// before scoring, which removes the potential part the data cannot see.
pub fn sinjectivity_experiment(spec: &MetricSpec, rank: usize, f: f64, h: f64, seed: u64, opts: &ExperimentOptions) -> Result<ReconReport> {
    if !(1..=2).contains(&rank) {
        return Err(Error::Unsupported(format!("recovery experiment for rank {rank}")));
    }
    let start = Instant::now();
    let mut g = Grid::torus(spec.x0, opts.grid[0], opts.grid[1], opts.grid[2])?;
    g.p = spec.p_exponent;
    let grid = Arc::new(g);
    let gauge = GaugeOperators::new(spec, grid.clone(), rank, f, h)?;
    let normal = NormalOperator::assemble(spec, grid.clone(), f, h, rank, &FanOptions::matrix())?;
    let f_true = gauged_field(&gauge, seed)?;
    let (mut data, path_stats) = apply_path(spec, &f_true, &FanOptions::path())?;
    let model = normal.apply(&f_true)?;
    let data_gap = data.sub(&model)?.norm() / model.norm().max(f64::MIN_POSITIVE);
    if opts.noise > 0.0 {
        let noise = TensorField::random_smooth(grid.clone(), rank, f, h, seed ^ 0x9e37_79b9)?;
        let scale = opts.noise * data.norm() / noise.norm().max(f64::MIN_POSITIVE);
        data.axpy(scale, &noise)?;
    }
    let mut stats = normal.stats.clone();
    stats.merge(&path_stats);
    let mut a = assemble_a(normal, gauge, 1.0)?;
    a.m0 = match opts.m0 {
        Some(m) if m > 0.0 && m.is_finite() => m,
        Some(m) => return Err(Error::Parameter(format!("m0 = {m} must be positive"))),
        None => balanced_m0(&a, seed.wrapping_add(1000))?,
    };
    let m0 = a.m0;
    let (u, inv) = invert(&a, &data, opts.tol, opts.max_iter)?;
    let f_rec = a.gauge.project_solenoidal(&u, PROJECTION_TOL)?.s;
    let tn = f_true.norm();
    let rel = |x: &TensorField| -> Result<f64> { Ok(x.sub(&f_true)?.norm() / tn) };
    let violation = |x: &TensorField| -> Result<f64> { Ok(a.gauge.ddiv(x)?.norm() / x.norm().max(f64::MIN_POSITIVE)) };
    Ok(ReconReport {
        rank,
        f,
        h,
        grid: opts.grid,
        grid_hash: grid.hash(),
        seed,
        m0,
        tol: opts.tol,
        iterations: inv.iterations,
        converged: inv.converged,
        recovery_error: rel(&f_rec)?,
        raw_error: rel(&u)?,
        gauge_violation: violation(&f_rec)?,
        input_gauge_violation: violation(&f_true)?,
        history: inv.history,
        normal_history: inv.normal_history,
        data_gap,
        stats,
        seconds: start.elapsed().as_secs_f64(),
    })
}
