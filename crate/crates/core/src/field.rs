//! Product grids on the collar, tensor fields stored in the sc-1c frame, the
//! weight `Φ`, the conjugation `e^{±FΦ/h}`, the cutoff profile `χ̃` and the
//! velocity pairing used by the transform.
//!
//! Grids are uniform in `q = ln x` and in the link chart. The outermost nodes
//! in `q` (and in `y` for non-periodic patches) are virtual: fields vanish
//! there, which is how the Dirichlet condition enters every discrete operator.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{frame_weights_unchecked, smoothstep, smoothstep_deriv, FrameWeights, Link};

/// Exponent above which `e^{FΦ/h}` factors are refused.
pub const OVERFLOW_EXPONENT: f64 = 200.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub link: Link,
    pub x0: f64,
    pub p: f64,
    /// `ln x` of the lower virtual node.
    pub q0: f64,
    pub dq: f64,
    pub nx: usize,
    /// Coordinate of node 0 (periodic) or of the lower virtual node (patch).
    pub y0: [f64; 2],
    pub dy: [f64; 2],
    pub ny: [usize; 2],
    pub periodic: bool,
}

/// Ratio of the lowest virtual node to `x0` on full collar grids.
pub const X_LO_RATIO: f64 = 0.05;

impl Grid {
    /// Full collar over the flat torus `(R/2πZ)²`, with `nx` log-spaced nodes
    /// strictly inside `(0.05·x0, x0)`.
    pub fn torus(x0: f64, nx: usize, n1: usize, n2: usize) -> Result<Grid> {
        if !(x0 > 0.0 && x0 < 1.0) {
            return Err(Error::Parameter(format!("x0 = {x0} outside (0, 1)")));
        }
        if nx < 2 || n1 < 2 || n2 < 2 {
            return Err(Error::Parameter("grid needs at least 2 nodes per axis".into()));
        }
        let q0 = (X_LO_RATIO * x0).ln();
        let dq = (x0.ln() - q0) / (nx + 1) as f64;
        let tau = std::f64::consts::TAU;
        Ok(Grid {
            link: Link::Torus,
            x0,
            p: 1.0,
            q0,
            dq,
            nx,
            y0: [0.0, 0.0],
            dy: [tau / n1 as f64, tau / n2 as f64],
            ny: [n1, n2],
            periodic: true,
        })
    }

    /// Local non-periodic patch centred at `(xc, yc)` with the given spacings
    /// in `q` and `y`; Dirichlet on all six faces.
    pub fn patch(x0: f64, xc: f64, yc: [f64; 2], n: [usize; 3], dq: f64, dy: [f64; 2]) -> Result<Grid> {
        if !(xc > 0.0 && xc < x0) {
            return Err(Error::Domain(format!("patch centre x = {xc} outside (0, x0)")));
        }
        let half_q = 0.5 * (n[0] + 1) as f64 * dq;
        let q0 = xc.ln() - half_q;
        if q0 + (n[0] + 1) as f64 * dq >= x0.ln() {
            return Err(Error::Domain("patch extends past x0".into()));
        }
        Ok(Grid {
            link: Link::Torus,
            x0,
            p: 1.0,
            q0,
            dq,
            nx: n[0],
            y0: [yc[0] - 0.5 * (n[1] + 1) as f64 * dy[0], yc[1] - 0.5 * (n[2] + 1) as f64 * dy[1]],
            dy,
            ny: [n[1], n[2]],
            periodic: false,
        })
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny[0] * self.ny[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.ny[0] + j) * self.ny[1] + k
    }

    pub fn unindex(&self, n: usize) -> (usize, usize, usize) {
        let k = n % self.ny[1];
        let r = n / self.ny[1];
        (r / self.ny[0], r % self.ny[0], k)
    }

    pub fn q_at(&self, i: usize) -> f64 {
        self.q0 + (i + 1) as f64 * self.dq
    }

    pub fn x_at(&self, i: usize) -> f64 {
        self.q_at(i).exp()
    }

    pub fn x_nodes(&self) -> Vec<f64> {
        (0..self.nx).map(|i| self.x_at(i)).collect()
    }

    pub fn y_at(&self, a: usize, j: usize) -> f64 {
        let off = if self.periodic { 0.0 } else { 1.0 };
        self.y0[a] + (j as f64 + off) * self.dy[a]
    }

    pub fn node(&self, n: usize) -> (f64, [f64; 2]) {
        let (i, j, k) = self.unindex(n);
        (self.x_at(i), [self.y_at(0, j), self.y_at(1, k)])
    }

    /// Upper virtual node in `x` (where fields vanish).
    pub fn x_hi(&self) -> f64 {
        (self.q0 + (self.nx + 1) as f64 * self.dq).exp()
    }

    pub fn x_lo(&self) -> f64 {
        self.q0.exp()
    }

    /// Quadrature weight of the density `dx dy / x⁴` at x-index `i`.
    pub fn measure(&self, i: usize) -> f64 {
        self.x_at(i).powi(-3) * self.dq * self.dy[0] * self.dy[1]
    }

    /// Diagonal of the discrete inner product on rank-`rank` fields:
    /// `measure · slot_weight` per degree of freedom.
    pub fn dof_weights(&self, rank: usize) -> Vec<f64> {
        let c = ncomp(rank);
        let mut w = Vec::with_capacity(self.len() * c);
        for n in 0..self.len() {
            let mu = self.measure(self.unindex(n).0);
            w.extend((0..c).map(|k| mu * slot_weight(rank, k)));
        }
        w
    }

    pub fn frame(&self, x: f64, h: f64) -> FrameWeights {
        frame_weights_unchecked(self.x0, self.p, x, h)
    }

    /// Hex SHA-256 of the grid description.
    pub fn hash(&self) -> String {
        let mut s = Sha256::new();
        s.update([self.link as u8, self.periodic as u8]);
        for v in [self.x0, self.p, self.q0, self.dq, self.y0[0], self.y0[1], self.dy[0], self.dy[1]] {
            s.update(v.to_le_bytes());
        }
        for n in [self.nx, self.ny[0], self.ny[1]] {
            s.update((n as u64).to_le_bytes());
        }
        hex(&s.finalize())
    }

    /// Trilinear stencil at `(x, y)`: up to eight `(node, weight)` pairs.
    /// Virtual and out-of-range nodes are dropped (zero extension).
    pub fn stencil(&self, x: f64, y: [f64; 2]) -> Stencil {
        let mut st = Stencil::default();
        if !(x > 0.0) {
            return st;
        }
        let tq = (x.ln() - self.q0) / self.dq - 1.0;
        let Some(ax) = axis(tq, self.nx, false) else { return st };
        let mut ay = [[(0usize, 0.0f64); 2]; 2];
        let mut cnt = [0usize; 2];
        for a in 0..2 {
            let off = if self.periodic { 0.0 } else { 1.0 };
            let t = (y[a] - self.y0[a]) / self.dy[a] - off;
            let Some(v) = axis(t, self.ny[a], self.periodic) else { return st };
            ay[a] = [v[0], v[1]];
            cnt[a] = 2;
        }
        for &(i, wi) in &ax {
            if wi == 0.0 || i == usize::MAX {
                continue;
            }
            for &(j, wj) in &ay[0][..cnt[0]] {
                if wj == 0.0 || j == usize::MAX {
                    continue;
                }
                for &(k, wk) in &ay[1][..cnt[1]] {
                    if wk == 0.0 || k == usize::MAX {
                        continue;
                    }
                    st.idx[st.n] = self.index(i, j, k);
                    st.w[st.n] = wi * wj * wk;
                    st.n += 1;
                }
            }
        }
        st
    }

    /// Nearest node to `(x, y)`, if inside the grid support.
    pub fn nearest(&self, x: f64, y: [f64; 2]) -> Option<usize> {
        if !(x > 0.0) {
            return None;
        }
        let i = ((x.ln() - self.q0) / self.dq - 1.0).round();
        if i < 0.0 || i >= self.nx as f64 {
            return None;
        }
        let mut jk = [0usize; 2];
        for a in 0..2 {
            let off = if self.periodic { 0.0 } else { 1.0 };
            let t = ((y[a] - self.y0[a]) / self.dy[a] - off).round();
            if self.periodic {
                jk[a] = (t as i64).rem_euclid(self.ny[a] as i64) as usize;
            } else if t < 0.0 || t >= self.ny[a] as f64 {
                return None;
            } else {
                jk[a] = t as usize;
            }
        }
        Some(self.index(i as usize, jk[0], jk[1]))
    }
}

/// Two-point linear weights along one axis, `usize::MAX` marking a dropped node.
fn axis(t: f64, n: usize, periodic: bool) -> Option<[(usize, f64); 2]> {
    if !t.is_finite() {
        return None;
    }
    let f = t.floor();
    let r = t - f;
    if periodic {
        let i = (f as i64).rem_euclid(n as i64) as usize;
        return Some([(i, 1.0 - r), ((i + 1) % n, r)]);
    }
    if f < -1.0 || f > n as f64 - 1.0 {
        return None;
    }
    let i = f as i64;
    let pick = |k: i64| if k >= 0 && (k as usize) < n { k as usize } else { usize::MAX };
    Some([(pick(i), 1.0 - r), (pick(i + 1), r)])
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Stencil {
    pub idx: [usize; 8],
    pub w: [f64; 8],
    pub n: usize,
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Which power of the weight a field carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conjugation {
    Plain,
    /// Multiplied by `e^{−FΦ/h}` (the `f_{h,F}` fields).
    Weighted,
    /// Multiplied by `e^{+FΦ/h}`.
    Inverse,
}

/// Number of frame components per node.
pub fn ncomp(rank: usize) -> usize {
    match rank {
        0 => 1,
        1 => 3,
        _ => 6,
    }
}

/// Storage order of the symmetric upper triangle.
pub const PAIRS: [(usize, usize); 6] = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];

pub fn pair_index(a: usize, b: usize) -> usize {
    let (a, b) = if a <= b { (a, b) } else { (b, a) };
    match (a, b) {
        (0, 0) => 0,
        (0, 1) => 1,
        (0, 2) => 2,
        (1, 1) => 3,
        (1, 2) => 4,
        _ => 5,
    }
}

/// Multiplicity of a stored component in the full contraction.
pub fn slot_weight(rank: usize, c: usize) -> f64 {
    if rank == 2 && PAIRS[c].0 != PAIRS[c].1 {
        2.0
    } else {
        1.0
    }
}

#[derive(Clone, Debug)]
pub struct TensorField {
    pub grid: Arc<Grid>,
    pub rank: usize,
    /// Node-major, components fastest.
    pub data: Vec<f64>,
    pub f: f64,
    pub h: f64,
    pub state: Conjugation,
}

impl TensorField {
    pub fn zeros(grid: Arc<Grid>, rank: usize, f: f64, h: f64) -> Result<TensorField> {
        if rank > 2 {
            return Err(Error::Unsupported(format!("rank {rank} tensors")));
        }
        let n = grid.len() * ncomp(rank);
        Ok(TensorField { grid, rank, data: vec![0.0; n], f, h, state: Conjugation::Weighted })
    }

    pub fn from_data(grid: Arc<Grid>, rank: usize, f: f64, h: f64, data: Vec<f64>) -> Result<TensorField> {
        let mut z = TensorField::zeros(grid, rank, f, h)?;
        if data.len() != z.data.len() {
            return Err(Error::Shape(format!("data length {} != {}", data.len(), z.data.len())));
        }
        z.data = data;
        Ok(z)
    }

    pub fn ncomp(&self) -> usize {
        ncomp(self.rank)
    }

    pub fn at(&self, node: usize) -> &[f64] {
        let c = self.ncomp();
        &self.data[node * c..(node + 1) * c]
    }

    pub fn at_mut(&mut self, node: usize) -> &mut [f64] {
        let c = self.ncomp();
        &mut self.data[node * c..(node + 1) * c]
    }

    pub fn check_compatible(&self, other: &TensorField) -> Result<()> {
        if self.rank != other.rank {
            return Err(Error::Shape(format!("rank {} vs {}", self.rank, other.rank)));
        }
        if !Arc::ptr_eq(&self.grid, &other.grid) && *self.grid != *other.grid {
            return Err(Error::Shape("fields live on different grids".into()));
        }
        Ok(())
    }

    /// Weighted L² pairing: frame components are orthonormal and the density
    /// is `dx dy / x⁴`.
    pub fn inner(&self, other: &TensorField) -> f64 {
        let c = self.ncomp();
        let g = &self.grid;
        let sw: Vec<f64> = (0..c).map(|k| slot_weight(self.rank, k)).collect();
        let per_i = g.ny[0] * g.ny[1];
        let mut acc = 0.0;
        for i in 0..g.nx {
            let mu = g.measure(i);
            let mut s = 0.0;
            for n in i * per_i..(i + 1) * per_i {
                let (a, b) = (&self.data[n * c..(n + 1) * c], &other.data[n * c..(n + 1) * c]);
                for k in 0..c {
                    s += sw[k] * a[k] * b[k];
                }
            }
            acc += mu * s;
        }
        acc
    }

    pub fn norm(&self) -> f64 {
        self.inner(self).max(0.0).sqrt()
    }

    pub fn scale(&mut self, a: f64) {
        self.data.iter_mut().for_each(|v| *v *= a);
    }

    /// `self += a·other`
    pub fn axpy(&mut self, a: f64, other: &TensorField) -> Result<()> {
        self.check_compatible(other)?;
        for (s, o) in self.data.iter_mut().zip(&other.data) {
            *s += a * o;
        }
        Ok(())
    }

    pub fn sub(&self, other: &TensorField) -> Result<TensorField> {
        let mut out = self.clone();
        out.axpy(-1.0, other)?;
        Ok(out)
    }

    /// Interpolated frame components at `(x, y)` (trilinear in `(ln x, y)`).
    pub fn interp(&self, x: f64, y: [f64; 2], out: &mut [f64]) {
        let c = self.ncomp();
        out[..c].iter_mut().for_each(|v| *v = 0.0);
        let st = self.grid.stencil(x, y);
        for s in 0..st.n {
            let base = st.idx[s] * c;
            for k in 0..c {
                out[k] += st.w[s] * self.data[base + k];
            }
        }
    }

    pub fn interp_nearest(&self, x: f64, y: [f64; 2], out: &mut [f64]) {
        let c = self.ncomp();
        match self.grid.nearest(x, y) {
            Some(n) => out[..c].copy_from_slice(self.at(n)),
            None => out[..c].iter_mut().for_each(|v| *v = 0.0),
        }
    }

    /// Band-limited random field with Dirichlet envelopes, in the weighted
    /// state: the plain field `e^{FΦ/h}·(this)` then decays like `e^{−C/x²}`
    /// with `C = F/(2h)` near the boundary.
    pub fn random_smooth(grid: Arc<Grid>, rank: usize, f: f64, h: f64, seed: u64) -> Result<TensorField> {
        let mut out = TensorField::zeros(grid.clone(), rank, f, h)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = out.ncomp();
        let kmax: i32 = 2;
        let modes: Vec<(i32, i32)> =
            (-kmax..=kmax).flat_map(|a| (-kmax..=kmax).map(move |b| (a, b))).filter(|m| m.0.abs() + m.1.abs() <= kmax).collect();
        let qspan = (grid.nx + 1) as f64 * grid.dq;
        let ylen = [(grid.ny[0] + 1) as f64 * grid.dy[0], (grid.ny[1] + 1) as f64 * grid.dy[1]];
        for comp in 0..c {
            let radial: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let coef: Vec<(f64, f64)> =
                modes.iter().map(|_| (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
            for n in 0..grid.len() {
                let (i, j, k) = grid.unindex(n);
                let s = (grid.q_at(i) - grid.q0) / qspan;
                let env = (std::f64::consts::PI * s).sin().powi(2);
                let rad = env * (radial[0] + radial[1] * s + radial[2] * s * s + 0.5);
                let (y1, y2) = (grid.y_at(0, j), grid.y_at(1, k));
                let ang = if grid.periodic {
                    let mut a = 0.0;
                    for (m, (cc, ss)) in modes.iter().zip(&coef) {
                        let ph = m.0 as f64 * y1 + m.1 as f64 * y2;
                        a += cc * ph.cos() + ss * ph.sin();
                    }
                    a
                } else {
                    let u = [(y1 - grid.y0[0]) / ylen[0], (y2 - grid.y0[1]) / ylen[1]];
                    let e = (std::f64::consts::PI * u[0]).sin().powi(2) * (std::f64::consts::PI * u[1]).sin().powi(2);
                    e * (coef[0].0 + coef[1].0 * u[0] + coef[2].0 * u[1])
                };
                out.data[n * c + comp] = rad * ang;
            }
        }
        Ok(out)
    }

    /// Binary dump: magic, JSON-free fixed header, then little-endian `f64`
    /// payload, node-major with components fastest.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let g = &*self.grid;
        w.write_all(MAGIC)?;
        w.write_all(&[self.rank as u8, state_code(self.state), g.link as u8, g.periodic as u8])?;
        for n in [g.nx, g.ny[0], g.ny[1]] {
            w.write_all(&(n as u32).to_le_bytes())?;
        }
        for v in [self.f, self.h, g.x0, g.p, g.q0, g.dq, g.y0[0], g.y0[1], g.dy[0], g.dy[1]] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<TensorField> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Config("not a tensor field dump".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let rank = b4[0] as usize;
        let state = match b4[1] {
            0 => Conjugation::Plain,
            1 => Conjugation::Weighted,
            2 => Conjugation::Inverse,
            s => return Err(Error::Config(format!("bad state code {s}"))),
        };
        let link = if b4[2] == 0 { Link::Sphere } else { Link::Torus };
        let periodic = b4[3] != 0;
        let mut dims = [0usize; 3];
        for d in &mut dims {
            let mut u = [0u8; 4];
            r.read_exact(&mut u)?;
            *d = u32::from_le_bytes(u) as usize;
        }
        let mut vals = [0.0f64; 10];
        for v in &mut vals {
            let mut u = [0u8; 8];
            r.read_exact(&mut u)?;
            *v = f64::from_le_bytes(u);
        }
        let grid = Grid {
            link,
            x0: vals[2],
            p: vals[3],
            q0: vals[4],
            dq: vals[5],
            nx: dims[0],
            y0: [vals[6], vals[7]],
            dy: [vals[8], vals[9]],
            ny: [dims[1], dims[2]],
            periodic,
        };
        let mut out = TensorField::zeros(Arc::new(grid), rank, vals[0], vals[1])?;
        out.state = state;
        for v in out.data.iter_mut() {
            let mut u = [0u8; 8];
            r.read_exact(&mut u)?;
            *v = f64::from_le_bytes(u);
        }
        Ok(out)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut head = vec!["x".to_string(), "y1".into(), "y2".into()];
        head.extend((0..self.ncomp()).map(|c| format!("c{c}")));
        wr.write_record(&head).map_err(crate::geodesic::csv_err)?;
        for n in 0..self.grid.len() {
            let (x, y) = self.grid.node(n);
            let mut rec = vec![crate::geodesic::fmt(x), crate::geodesic::fmt(y[0]), crate::geodesic::fmt(y[1])];
            rec.extend(self.at(n).iter().map(|v| crate::geodesic::fmt(*v)));
            wr.write_record(&rec).map_err(crate::geodesic::csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }
}

const MAGIC: &[u8; 8] = b"CTOMOFLD";

fn state_code(s: Conjugation) -> u8 {
    match s {
        Conjugation::Plain => 0,
        Conjugation::Weighted => 1,
        Conjugation::Inverse => 2,
    }
}

/// The weight `Φ`: `−1/(2x²)` on `x ≤ x0/3`, `1/(x0 − x)` on `x ≥ 2x0/3`,
/// quintic blend in between.
pub fn phi_weight(x: f64, x0: f64) -> Result<f64> {
    if !(x > 0.0 && x < x0) {
        return Err(Error::Domain(format!("x = {x} outside (0, {x0})")));
    }
    Ok(phi_unchecked(x, x0))
}

pub fn phi_deriv(x: f64, x0: f64) -> Result<f64> {
    if !(x > 0.0 && x < x0) {
        return Err(Error::Domain(format!("x = {x} outside (0, {x0})")));
    }
    Ok(phi_deriv_unchecked(x, x0))
}

pub(crate) fn phi_unchecked(x: f64, x0: f64) -> f64 {
    let (a, b) = (x0 / 3.0, 2.0 * x0 / 3.0);
    let cusp = -0.5 / x / x;
    if x <= a {
        return cusp;
    }
    let sc = 1.0 / (x0 - x);
    if x >= b {
        return sc;
    }
    let s = smoothstep((x - a) / (b - a));
    (1.0 - s) * cusp + s * sc
}

pub(crate) fn phi_deriv_unchecked(x: f64, x0: f64) -> f64 {
    let (a, b) = (x0 / 3.0, 2.0 * x0 / 3.0);
    let d_cusp = 1.0 / (x * x * x);
    if x <= a {
        return d_cusp;
    }
    let d_sc = 1.0 / ((x0 - x) * (x0 - x));
    if x >= b {
        return d_sc;
    }
    let t = (x - a) / (b - a);
    let s = smoothstep(t);
    let ds = smoothstep_deriv(t) / (b - a);
    (1.0 - s) * d_cusp + s * d_sc + ds * (1.0 / (x0 - x) + 0.5 / (x * x))
}

/// Multiply by `e^{sign·FΦ/h}` node by node, in log space.
pub fn apply_conjugation(field: &TensorField, f: f64, h: f64, sign: i32) -> Result<TensorField> {
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("h = {h} must be positive")));
    }
    let next = match (field.state, sign.signum()) {
        (Conjugation::Plain, 1) => Conjugation::Inverse,
        (Conjugation::Plain, -1) => Conjugation::Weighted,
        (Conjugation::Weighted, 1) | (Conjugation::Inverse, -1) => Conjugation::Plain,
        (s, 0) => return Err(Error::Parameter(format!("sign must be ±1 (state {s:?})"))),
        (s, _) => return Err(Error::State(format!("field already {s:?}; conjugation applied twice"))),
    };
    let g = &field.grid;
    let mut out = field.clone();
    let c = field.ncomp();
    let per_i = g.ny[0] * g.ny[1];
    for i in 0..g.nx {
        let e = sign.signum() as f64 * f * phi_weight(g.x_at(i), g.x0)? / h;
        if e > OVERFLOW_EXPONENT {
            return Err(Error::Overflow { exponent: e, limit: OVERFLOW_EXPONENT });
        }
        let m = e.exp();
        for v in &mut out.data[i * per_i * c..(i + 1) * per_i * c] {
            *v *= m;
        }
    }
    out.state = next;
    out.f = f;
    out.h = h;
    Ok(out)
}

/// Gaussian cutoff profile `χ̃(λ̂) = e^{λ̂²/(2ν)}`, `ν = α/F`.
pub fn chi_cutoff(lambda_hat: f64, alpha: f64, f: f64) -> Result<f64> {
    if !(alpha < 0.0) {
        return Err(Error::Precondition(format!("α = {alpha} must be negative")));
    }
    if !(f > 0.0) {
        return Err(Error::Parameter(format!("F = {f} must be positive")));
    }
    let nu = alpha / f;
    Ok((lambda_hat * lambda_hat / (2.0 * nu)).exp())
}

/// Rescaled radial velocity: `λ/(h^{1/2}x)` in the 1c regime and
/// `xλ/(h^{1/2}(x0 − x))` in the sc regime; the ratio `w_y/w_x` of frame
/// weights, which interpolates between them, is used in the blend.
pub fn rescale_lambda(x: f64, x0: f64, lambda: f64, h: f64) -> f64 {
    let fw = frame_weights_unchecked(x0, 1.0, x, h);
    lambda * x * fw.wx / fw.wy
}

/// Convert frame components to coordinate components (`∂x, ∂y` basis duals).
pub fn frame_to_coord(rank: usize, fw: &FrameWeights, comps: &[f64], out: &mut [f64]) {
    let w = [fw.wx, fw.wy, fw.wy];
    match rank {
        0 => out[0] = comps[0],
        1 => (0..3).for_each(|a| out[a] = w[a] * comps[a]),
        _ => (0..6).for_each(|c| {
            let (a, b) = PAIRS[c];
            out[c] = w[a] * w[b] * comps[c];
        }),
    }
}

pub fn coord_to_frame(rank: usize, fw: &FrameWeights, comps: &[f64], out: &mut [f64]) {
    let w = [fw.wx, fw.wy, fw.wy];
    match rank {
        0 => out[0] = comps[0],
        1 => (0..3).for_each(|a| out[a] = comps[a] / w[a]),
        _ => (0..6).for_each(|c| {
            let (a, b) = PAIRS[c];
            out[c] = comps[c] / (w[a] * w[b]);
        }),
    }
}

/// Contract coordinate components with `v^{⊗rank}`.
pub fn contract(rank: usize, coord: &[f64], v: &[f64; 3]) -> f64 {
    match rank {
        0 => coord[0],
        1 => coord[0] * v[0] + coord[1] * v[1] + coord[2] * v[2],
        _ => PAIRS
            .iter()
            .enumerate()
            .map(|(c, &(a, b))| slot_weight(2, c) * coord[c] * v[a] * v[b])
            .sum(),
    }
}

/// `f(γ(t))(V, …, V)` with `V = xλ∂x + ω∂y` the tangent at the state, using
/// trilinear interpolation of the frame components.
pub fn pair_velocity(field: &TensorField, x: f64, y: [f64; 2], lambda: f64, omega: [f64; 2], nearest: bool) -> Result<f64> {
    if field.rank > 2 {
        return Err(Error::Unsupported(format!("rank {}", field.rank)));
    }
    let mut comps = [0.0; 6];
    if nearest {
        field.interp_nearest(x, y, &mut comps);
    } else {
        field.interp(x, y, &mut comps);
    }
    let fw = field.grid.frame(x, field.h);
    let mut coord = [0.0; 6];
    frame_to_coord(field.rank, &fw, &comps, &mut coord);
    Ok(contract(field.rank, &coord, &[x * lambda, omega[0], omega[1]]))
}

/// Random draw helper shared by tests and experiments.
pub fn random_unit(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(-1.0..1.0)
}
