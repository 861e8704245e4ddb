use std::ffi::CStr;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use conic_tomo_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(ct_last_error()) }.to_string_lossy().into_owned()
}

fn cone(link: CtLink) -> *mut CtMetric {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { ct_metric_new_cone(0.5, link, &mut m) }, CtStatus::Ok);
    assert!(!m.is_null());
    m
}

#[test]
fn metric_handles_and_errors() {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { ct_metric_new_cone(1.5, CtLink::Torus, &mut m) }, CtStatus::InvalidArgument);
    assert!(m.is_null());
    assert!(last_error().contains("x0"), "{}", last_error());
    assert_eq!(unsafe { ct_metric_new_cone(0.5, CtLink::Torus, ptr::null_mut()) }, CtStatus::NullPointer);
    unsafe { ct_metric_free(ptr::null_mut()) };
    let v = unsafe { CStr::from_ptr(ct_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn geodesic_buffer_protocol() {
    let m = cone(CtLink::Torus);
    let (y, om) = ([0.3, 0.4], [0.6, 0.8]);
    let mut len = 0usize;
    let st = unsafe { ct_geodesic_shoot(m, 0.2, y.as_ptr(), 0.3, om.as_ptr(), 1e-10, ptr::null_mut(), 0, &mut len) };
    assert_eq!(st, CtStatus::BufferTooSmall);
    assert!(len > 10);
    let mut buf = vec![CtSample::default(); len];
    let st = unsafe { ct_geodesic_shoot(m, 0.2, y.as_ptr(), 0.3, om.as_ptr(), 1e-10, buf.as_mut_ptr(), len, &mut len) };
    assert_eq!(st, CtStatus::Ok);
    assert!(buf.windows(2).all(|w| w[0].t < w[1].t));
    assert!(buf.iter().all(|s| s.energy_drift.abs() < 1e-8 && s.x > 0.0 && s.x <= 0.5 + 1e-12));
    let mut err = 1.0;
    assert_eq!(unsafe { ct_cone_comparison(m, 4, 2, 1e-11, &mut err) }, CtStatus::Ok);
    assert!(err < 1e-6);
    assert_eq!(unsafe { ct_geodesic_shoot(m, -1.0, y.as_ptr(), 0.0, om.as_ptr(), 1e-10, ptr::null_mut(), 0, &mut len) }, CtStatus::Domain);
    unsafe { ct_metric_free(m) };
}

#[test]
fn scalar_symbol() {
    let mut s = 0.0;
    assert_eq!(unsafe { ct_sigma_laplacian_scalar(CtRegime::OneCusp, 0.05, 1.0, 2.0, 0.0, 3.0, &mut s) }, CtStatus::Ok);
    assert!((s - 14.0).abs() < 1e-12);
}

#[test]
fn gauge_handle() {
    let m = cone(CtLink::Torus);
    let mut g = ptr::null_mut();
    assert_eq!(unsafe { ct_gauge_new(m, 8, 8, 8, 1, 1.0, 0.1, &mut g) }, CtStatus::Ok);
    let mut d = CtGaugeDiagnostics::default();
    assert_eq!(unsafe { ct_gauge_diagnostics(g, 1e-10, 1, &mut d) }, CtStatus::Ok);
    assert!(d.adjointness <= 1e-12 && d.solenoidal <= 1e-9 && d.potential <= 1e-9 && d.idempotence <= 2e-9, "{d:?}");
    unsafe { ct_gauge_free(g) };
    let s = cone(CtLink::Sphere);
    let mut g2 = ptr::null_mut();
    assert_eq!(unsafe { ct_gauge_new(s, 8, 8, 8, 1, 1.0, 0.1, &mut g2) }, CtStatus::Unsupported);
    assert!(g2.is_null());
    unsafe {
        ct_metric_free(m);
        ct_metric_free(s);
    }
}

#[test]
fn reconstruct_rejects_rank_zero() {
    let m = cone(CtLink::Torus);
    let mut r = CtReconSummary::default();
    let st = unsafe { ct_reconstruct(m, 0, 1.0, 0.1, 1, 8, 8, 8, 0.0, 1e-8, 10, &mut r) };
    assert_ne!(st, CtStatus::Ok);
    unsafe { ct_metric_free(m) };
}

fn target_dir() -> PathBuf {
    // tests run from target/<profile>/deps
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_the_static_library() {
    let dir = env!("CARGO_MANIFEST_DIR");
    let lib = target_dir().join("libconic_tomo_ffi.a");
    assert!(lib.is_file(), "static library missing at {}", lib.display());
    let bin = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("ffi_smoke");
    let status = Command::new("cc")
        .args(["-std=c11", "-Wall", "-Werror", "-o"])
        .arg(&bin)
        .arg(format!("{dir}/tests/c/smoke.c"))
        .arg(format!("-I{dir}/include"))
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl"])
        .status()
        .expect("C compiler");
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "smoke exited with {:?}", out.status.code());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
