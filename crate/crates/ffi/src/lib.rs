//! C interface. Objects cross the boundary as opaque handles created by a
//! `ct_*_new` call and released by the matching `ct_*_free`. Every fallible
//! call returns a [`CtStatus`]; the message of the last failure on the
//! calling thread is available from [`ct_last_error`]. Panics are caught and
//! reported as [`CtStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use conic_tomo::field::Grid;
use conic_tomo::gauge::GaugeOperators;
use conic_tomo::geodesic::{cone_comparison, shoot, GeodesicState};
use conic_tomo::geometry::{Link, MetricSpec, Regime};
use conic_tomo::recon::{sinjectivity_experiment, ExperimentOptions};
use conic_tomo::symbolics::{sigma_laplacian, FiberPoint};
use conic_tomo::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Domain = 3,
    Numerical = 4,
    Unsupported = 5,
    BufferTooSmall = 6,
    Io = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CtLink {
    Sphere = 0,
    Torus = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CtRegime {
    OneCusp = 0,
    Scattering = 1,
}

/// Collar metric.
pub struct CtMetric {
    spec: MetricSpec,
}

/// Gauge operators `d`, `δ`, `Δ` on a torus grid.
pub struct CtGauge {
    ops: GaugeOperators,
}

/// One sample of an integrated geodesic.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct CtSample {
    pub t: f64,
    pub x: f64,
    pub y: [f64; 2],
    pub lambda: f64,
    pub omega: [f64; 2],
    pub energy_drift: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct CtGaugeDiagnostics {
    pub adjointness: f64,
    pub solenoidal: f64,
    pub potential: f64,
    pub idempotence: f64,
    pub iterations: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct CtReconSummary {
    pub recovery_error: f64,
    pub gauge_violation: f64,
    pub data_gap: f64,
    pub m0: f64,
    pub iterations: usize,
    pub converged: bool,
    pub seconds: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> CtStatus {
    match e {
        Error::Parameter(_) | Error::Config(_) | Error::Shape(_) => CtStatus::InvalidArgument,
        Error::Domain(_) | Error::DegenerateMetric(_) | Error::State(_) | Error::Precondition(_) => CtStatus::Domain,
        Error::Overflow { .. } | Error::Numerical(_) => CtStatus::Numerical,
        Error::Unsupported(_) => CtStatus::Unsupported,
        Error::Io(_) => CtStatus::Io,
    }
}

/// Run `f`, translating errors and panics into a status code.
fn guard<F>(f: F) -> CtStatus
where
    F: FnOnce() -> Result<(), (CtStatus, String)>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CtStatus::Ok,
        Ok(Err((s, m))) => {
            set_error(&m);
            s
        }
        Err(p) => {
            let m = p.downcast_ref::<&str>().map(|s| s.to_string()).or_else(|| p.downcast_ref::<String>().cloned());
            set_error(&format!("panic: {}", m.unwrap_or_default()));
            CtStatus::Panic
        }
    }
}

fn lib(e: Error) -> (CtStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (CtStatus, String) {
    (CtStatus::NullPointer, format!("{what} is null"))
}

fn link_of(l: CtLink) -> Link {
    match l {
        CtLink::Sphere => Link::Sphere,
        CtLink::Torus => Link::Torus,
    }
}

/// Message of the last failed call on this thread; valid until the next call.
#[no_mangle]
pub extern "C" fn ct_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ct_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Exact cone `dx²/x⁴ + g0/x²` with artificial boundary `x0`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn ct_metric_new_cone(x0: f64, link: CtLink, out: *mut *mut CtMetric) -> CtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let spec = MetricSpec::cone(x0, link_of(link));
        spec.validate().map_err(lib)?;
        unsafe { *out = Box::into_raw(Box::new(CtMetric { spec })) };
        Ok(())
    })
}

/// # Safety
/// `m` must come from `ct_metric_new_cone` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ct_metric_free(m: *mut CtMetric) {
    if !m.is_null() {
        drop(unsafe { Box::from_raw(m) });
    }
}

/// Integrate the unit-speed geodesic through `(x, y)` with direction
/// `(λ, ω)` (normalized internally). Writes up to `cap` samples and the total
/// count to `len`; returns `BufferTooSmall` when `cap < len`.
///
/// # Safety
/// `m` must be a live handle, `y` and `omega` point to two doubles, `buf` to
/// `cap` samples (may be null when `cap` is 0) and `len` to one count.
#[no_mangle]
pub unsafe extern "C" fn ct_geodesic_shoot(
    m: *const CtMetric,
    x: f64,
    y: *const f64,
    lambda: f64,
    omega: *const f64,
    tol: f64,
    buf: *mut CtSample,
    cap: usize,
    len: *mut usize,
) -> CtStatus {
    guard(|| {
        if m.is_null() || y.is_null() || omega.is_null() || len.is_null() || (buf.is_null() && cap > 0) {
            return Err(null("argument"));
        }
        let (m, y, omega) = unsafe { (&*m, [*y, *y.add(1)], [*omega, *omega.add(1)]) };
        let p = shoot(&m.spec, &GeodesicState { x, y, lambda, omega, t: 0.0 }, tol).map_err(lib)?;
        unsafe { *len = p.samples.len() };
        for (k, s) in p.samples.iter().take(cap).enumerate() {
            let st = &s.state;
            let v = CtSample { t: st.t, x: st.x, y: st.y, lambda: st.lambda, omega: st.omega, energy_drift: s.energy_drift };
            unsafe { *buf.add(k) = v };
        }
        if cap < p.samples.len() {
            return Err((CtStatus::BufferTooSmall, format!("{} samples, buffer holds {cap}", p.samples.len())));
        }
        Ok(())
    })
}

/// Largest deviation from the exact conic flow over `n` random
/// initializations.
///
/// # Safety
/// `m` must be a live handle and `max_error` point to one double.
#[no_mangle]
pub unsafe extern "C" fn ct_cone_comparison(m: *const CtMetric, n: usize, seed: u64, tol: f64, max_error: *mut f64) -> CtStatus {
    guard(|| {
        if m.is_null() || max_error.is_null() {
            return Err(null("argument"));
        }
        let rows = cone_comparison(unsafe { &(*m).spec }, n, seed, tol, 0.05).map_err(lib)?;
        unsafe { *max_error = rows.iter().map(|r| r.max_error).fold(0.0, f64::max) };
        Ok(())
    })
}

/// Scalar principal symbol of the conjugated Laplacian on functions on the
/// exact-cone model at base point `x`.
///
/// # Safety
/// `out` must point to one double.
#[no_mangle]
pub unsafe extern "C" fn ct_sigma_laplacian_scalar(
    regime: CtRegime,
    x: f64,
    xi: f64,
    eta1: f64,
    eta2: f64,
    f: f64,
    out: *mut f64,
) -> CtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let r = match regime {
            CtRegime::OneCusp => Regime::OneCusp,
            CtRegime::Scattering => Regime::Scattering,
        };
        let s = sigma_laplacian(&FiberPoint::model(r, x, xi, [eta1, eta2], f), 0).map_err(lib)?;
        unsafe { *out = s.m[(0, 0)].re };
        Ok(())
    })
}

/// Gauge operators into rank `rank` (1 or 2) on an `nx × n1 × n2` torus grid.
///
/// # Safety
/// `m` must be a live handle and `out` valid storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn ct_gauge_new(
    m: *const CtMetric,
    nx: usize,
    n1: usize,
    n2: usize,
    rank: usize,
    f: f64,
    h: f64,
    out: *mut *mut CtGauge,
) -> CtStatus {
    guard(|| {
        if m.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let spec = unsafe { &(*m).spec };
        let mut g = Grid::torus(spec.x0, nx, n1, n2).map_err(lib)?;
        g.p = spec.p_exponent;
        let ops = GaugeOperators::new(spec, Arc::new(g), rank, f, h).map_err(lib)?;
        unsafe { *out = Box::into_raw(Box::new(CtGauge { ops })) };
        Ok(())
    })
}

/// # Safety
/// `g` must come from `ct_gauge_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ct_gauge_free(g: *mut CtGauge) {
    if !g.is_null() {
        drop(unsafe { Box::from_raw(g) });
    }
}

/// Adjointness, solenoidal, potential and idempotence defects.
///
/// # Safety
/// `g` must be a live handle and `out` point to one struct.
#[no_mangle]
pub unsafe extern "C" fn ct_gauge_diagnostics(g: *const CtGauge, tol: f64, seed: u64, out: *mut CtGaugeDiagnostics) -> CtStatus {
    guard(|| {
        if g.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let d = unsafe { &(*g).ops }.diagnostics(tol, seed).map_err(lib)?;
        unsafe {
            *out = CtGaugeDiagnostics {
                adjointness: d.adjointness,
                solenoidal: d.solenoidal,
                potential: d.potential,
                idempotence: d.idempotence,
                iterations: d.solve.iterations,
            }
        };
        Ok(())
    })
}

/// End-to-end recovery of a random gauged rank-`rank` field; `m0 ≤ 0`
/// selects the balanced default.
///
/// # Safety
/// `m` must be a live handle and `out` point to one struct.
#[no_mangle]
pub unsafe extern "C" fn ct_reconstruct(
    m: *const CtMetric,
    rank: usize,
    f: f64,
    h: f64,
    seed: u64,
    nx: usize,
    n1: usize,
    n2: usize,
    m0: f64,
    tol: f64,
    max_iter: usize,
    out: *mut CtReconSummary,
) -> CtStatus {
    guard(|| {
        if m.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let opts = ExperimentOptions { grid: [nx, n1, n2], m0: (m0 > 0.0).then_some(m0), tol, max_iter, noise: 0.0 };
        let r = sinjectivity_experiment(unsafe { &(*m).spec }, rank, f, h, seed, &opts).map_err(lib)?;
        unsafe {
            *out = CtReconSummary {
                recovery_error: r.recovery_error,
                gauge_violation: r.gauge_violation,
                data_gap: r.data_gap,
                m0: r.m0,
                iterations: r.iterations,
                converged: r.converged,
                seconds: r.seconds,
            }
        };
        Ok(())
    })
}
