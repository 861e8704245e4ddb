//! Acceptance suite: one PASS/FAIL line per criterion, thresholds pinned here.
//! Runs without the libtest harness so the lines are always printed; the
//! process exits non-zero if any criterion fails.

use std::f64::consts::{PI, TAU};
use std::sync::Arc;
use std::time::Instant;

use conic_tomo::field::Grid;
use conic_tomo::gauge::GaugeOperators;
use conic_tomo::geodesic::{concavity_alpha, cone_comparison, conjugate_scan};
use conic_tomo::geometry::{link_metric, Link, MetricSpec, Regime};
use conic_tomo::recon::{sinjectivity_experiment, ExperimentOptions, ReconReport};
use conic_tomo::symbolics::{
    c_list, c_moments, crossing, ellipticity_margin, loglog_slope, margin_sweep, probe_operator_symbol, sigma_laplacian,
    wave_packet, CoefficientVariant, FiberPoint, MarginKind, SampleSpec,
};
use conic_tomo::xray::{apply_path_at, fan_geodesics, potential_transform_check, FanOptions, Potential};
use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const X0: f64 = 0.5;

struct Line {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &'static str, pass: bool, detail: String) -> Line {
    println!("[{id:>2}] {} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    Line { id, name, pass, detail }
}

fn c1_conic_flow() -> Line {
    let t = Instant::now();
    let mut worst = 0.0f64;
    for link in [Link::Torus, Link::Sphere] {
        let rows = cone_comparison(&MetricSpec::cone(X0, link), 50, 1, 1e-11, 0.05).expect("cone comparison");
        assert_eq!(rows.len(), 50);
        worst = rows.iter().map(|r| r.max_error).fold(worst, f64::max);
    }
    let s = t.elapsed().as_secs_f64();
    report(1, "conic flow exactness", worst < 1e-6 && s < 10.0, format!("sup error {worst:.2e} (< 1e-6), {s:.2} s (< 10 s)"))
}

fn c2_concavity() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut bad = 0;
    let mut top = f64::NEG_INFINITY;
    for link in [Link::Torus, Link::Sphere] {
        let spec = MetricSpec::cone(X0, link);
        for _ in 0..100 {
            let x = X0 * rng.random_range(0.05..0.9);
            let y = match link {
                Link::Torus => [rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)],
                Link::Sphere => [rng.random_range(0.4..PI - 0.4), rng.random_range(0.0..TAU)],
            };
            let a = rng.random_range(0.0..TAU);
            let (g, _) = link_metric(link, y);
            let om = [a.cos() / g[(0, 0)].sqrt(), a.sin() / g[(1, 1)].sqrt()];
            let fit = concavity_alpha(&spec, x, y, 0.0, om).expect("concavity fit");
            top = top.max(fit.alpha);
            if fit.alpha.is_nan() || fit.alpha >= 0.0 {
                bad += 1;
            }
        }
    }
    report(2, "concavity at tangency", bad == 0, format!("{bad} of 200 points with α ≥ 0, largest α {top:.3e}"))
}

fn c3_conjugate() -> Line {
    let s2 = conjugate_scan(Link::Sphere, [PI / 2.0, 0.0], [1.0, 0.0], PI).expect("sphere scan");
    let t2 = conjugate_scan(Link::Torus, [0.0, 0.0], [1.0, 0.0], PI).expect("torus scan");
    let s2_ok = s2.is_some_and(|d| (d - PI).abs() <= 1e-4);
    let hyp = s2.is_none_or(|d| d > PI / 2.0);
    report(
        3,
        "conjugate points",
        s2_ok && t2.is_none() && hyp,
        format!("S² first at {s2:?} (π ± 1e-4), T² {t2:?} up to π (none), none within π/2: {hyp}"),
    )
}

fn c4_potential_kernel() -> Line {
    let spec = MetricSpec::cone(X0, Link::Torus);
    let mut worst = 0.0f64;
    let mut n = 0;
    for rank in 0..=1 {
        for seed in 0..20u64 {
            let pot = Potential::random(rank, X0, 100 + seed).expect("potential");
            for (xk, y) in [(0.3, [0.0, 0.0]), (0.6, [1.0, 2.0])] {
                let paths = fan_geodesics(&spec, xk * X0, y, 1.0, 0.1, 4, 8, 1e-10).expect("fan");
                let (w, scale) = potential_transform_check(&spec, &pot, &paths).expect("transform");
                worst = worst.max(w / scale);
                n += paths.len();
            }
        }
    }
    report(4, "potentials in the kernel", worst <= 1e-5, format!("max |I(d^s v)|/scale {worst:.2e} (≤ 1e-5) over {n} geodesics"))
}

fn random_point(rng: &mut ChaCha8Rng, regime: Regime) -> FiberPoint {
    let x = match regime {
        Regime::Scattering => rng.random_range(0.3..0.49),
        _ => rng.random_range(0.01..0.1),
    };
    let xi = rng.random_range(-10.0..10.0);
    let eta = [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)];
    FiberPoint::model(regime, x, xi, eta, rng.random_range(0.1..20.0))
}

fn hand_laplacian_1(xi: f64, eta: [f64; 2], f: f64) -> DMatrix<C64> {
    let zeta = C64::new(xi, -f);
    let z2 = zeta.norm_sqr();
    let e2 = eta[0] * eta[0] + eta[1] * eta[1];
    DMatrix::from_fn(3, 3, |i, j| match (i, j) {
        (0, 0) => C64::new(z2 + 0.5 * e2, 0.0),
        (0, k) => zeta * (0.5 * eta[k - 1]),
        (k, 0) => zeta.conj() * (0.5 * eta[k - 1]),
        (j, k) => {
            let d = if j == k { 0.5 * (z2 + e2) } else { 0.0 };
            C64::new(d + 0.5 * eta[j - 1] * eta[k - 1], 0.0)
        }
    })
}

fn c5_symbols() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut e0, mut e1) = (0.0f64, 0.0f64);
    for k in 0..1000 {
        let regime = if k % 2 == 0 { Regime::OneCusp } else { Regime::Scattering };
        let p = random_point(&mut rng, regime);
        let want = p.xi * p.xi + p.f * p.f + p.eta[0] * p.eta[0] + p.eta[1] * p.eta[1];
        let l0 = sigma_laplacian(&p, 0).expect("rank 0").m[(0, 0)];
        e0 = e0.max((l0 - want).norm() / want);
        let q = random_point(&mut rng, Regime::OneCusp).without_bs();
        let l1 = sigma_laplacian(&q, 1).expect("rank 1").m;
        e1 = e1.max((l1 - hand_laplacian_1(q.xi, q.eta, q.f)).camax());
    }
    report(
        5,
        "symbol exactness",
        e0 <= 4.0 * f64::EPSILON && e1 <= 1e-12,
        format!("rank 0 relative {e0:.1e} (≤ 4ε), rank 1 blocks {e1:.1e} (≤ 1e-12) at 1000 points"),
    )
}

fn c6_factorization() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for k in 0..1000 {
        let regime = if k % 2 == 0 { Regime::OneCusp } else { Regime::Scattering };
        let p = random_point(&mut rng, regime);
        let th: f64 = rng.random_range(0.0..TAU);
        let om = [th.cos(), th.sin()];
        let cl = c_list(&p, om, CoefficientVariant::Adjoint).expect("c list");
        let (m, _) = c_moments(&p, om).expect("moments");
        for (i, row) in m.iter().enumerate() {
            for (j, cij) in row.iter().enumerate() {
                worst = worst.max((cl.product(i, j) - cij).norm() / (1.0 + cij.norm()));
            }
        }
    }
    report(6, "C factorization", worst <= 1e-12, format!("max |C_i0·C_0j − C_ij|/(1+|C_ij|) {worst:.1e} (≤ 1e-12) at 1000 points"))
}

fn c7_margins() -> Line {
    let t = Instant::now();
    let spec = SampleSpec::default();
    let kind = MarginKind::Kernel;
    let v = CoefficientVariant::Adjoint;
    let m1 = ellipticity_margin(1, 1.0, &spec, kind, v).expect("rank 1 margin").margin;
    let m2 = ellipticity_margin(2, 20.0, &spec, kind, v).expect("rank 2 margin").margin;
    let fs = [0.1, 0.5, 1.0, 3.0, 5.0, 10.0, 20.0];
    let sweep = margin_sweep(2, &fs, &spec, kind, v).expect("sweep");
    let cross = crossing(&sweep);
    let s = t.elapsed().as_secs_f64();
    let curve: Vec<String> = sweep.iter().map(|p| format!("{}:{:.2e}", p.f, p.margin)).collect();
    report(
        7,
        "ellipticity margins",
        m1 > 0.0 && m2 > 0.0 && cross.is_some() && s < 120.0,
        format!(
            "rank 1 F=1 {m1:.3e} (> 0), rank 2 F=20 {m2:.3e} (> 0), rank 2 sweep crossing {cross:?} (needs one) [{}], {s:.1} s (< 120 s)",
            curve.join(" ")
        ),
    )
}

fn c8_gauge() -> Line {
    let tol = 1e-10;
    let spec = MetricSpec::cone(X0, Link::Torus);
    let g = Arc::new(Grid::torus(X0, 16, 16, 16).expect("grid"));
    let mut pass = true;
    let mut parts = Vec::new();
    for rank in 1..=2 {
        let op = GaugeOperators::new(&spec, g.clone(), rank, 1.0, 0.1).expect("operators");
        let d = op.diagnostics(tol, 8).expect("diagnostics");
        pass &= d.adjointness <= 1e-12 && d.solenoidal <= 10.0 * tol && d.potential <= 10.0 * tol && d.idempotence <= 20.0 * tol;
        parts.push(format!(
            "rank {rank}: adjoint {:.1e} (≤ 1e-12), δS {:.1e} (≤ 1e-9), Sd {:.1e} (≤ 1e-9), SS−S {:.1e} (≤ 2e-9)",
            d.adjointness, d.solenoidal, d.potential, d.idempotence
        ));
    }
    report(8, "gauge algebra", pass, parts.join("; "))
}

fn c9_probes() -> Line {
    let spec = MetricSpec::cone(X0, Link::Torus);
    let (h, x) = (0.05f64, 0.1f64);
    // 1c patch with cells of an eighth of a frame unit
    let cell = 0.125;
    let g = Arc::new(Grid::patch(X0, x, [0.0, 0.0], [32, 32, 32], cell * h * x * x, [cell * h.sqrt() * x; 2]).expect("patch"));
    let centre = g.index(16, 16, 16);
    let points: [(f64, [f64; 2], f64); 10] = [
        (1.0, [0.0, 0.0], 2.0),
        (0.0, [0.0, 0.0], 2.0),
        (-1.0, [0.5, 0.0], 2.0),
        (2.0, [0.0, 1.0], 2.0),
        (0.5, [-1.0, 1.0], 2.0),
        (0.0, [1.5, 0.0], 1.0),
        (1.5, [0.0, -1.5], 1.0),
        (-0.5, [0.7, 0.7], 1.0),
        (0.0, [0.0, 2.0], 1.5),
        (1.0, [1.0, 1.0], 1.5),
    ];
    let mut lap_worst = 0.0f64;
    for (xi, eta, f) in points {
        let op = GaugeOperators::new(&spec, g.clone(), 1, f, h).expect("operators");
        let pk = wave_packet(g.clone(), centre, xi, eta, f, h, 4.0).expect("packet");
        let v = probe_operator_symbol(|u| op.laplacian(u), &pk).expect("probe");
        let want = xi * xi + f * f + eta[0] * eta[0] + eta[1] * eta[1];
        lap_worst = lap_worst.max((v - want).norm() / want);
    }

    // N at 1/128 frame-unit cells; packets of width 1/3 so that k·width ≥ 2.7
    let cell = 1.0 / 128.0;
    let g = Arc::new(Grid::patch(X0, x, [0.0, 0.0], [256, 256, 256], cell * h * x * x, [cell * h.sqrt() * x; 2]).expect("patch"));
    let centre = g.index(128, 128, 128);
    let ks = [8.0, 16.0, 32.0];
    let mut slopes = Vec::new();
    for dir in [[0.0, 1.0, 0.0], [0.0, 0.6, -0.8], [0.6, 0.0, 0.8], [0.6, 0.8, 0.0]] {
        let mut ys = Vec::new();
        for k in ks {
            let pk = wave_packet(g.clone(), centre, k * dir[0], [k * dir[1], k * dir[2]], 2.0, h, 1.0 / 3.0).expect("packet");
            let a = apply_path_at(&spec, &pk.cos, centre, &FanOptions::path()).expect("N")[0];
            let b = apply_path_at(&spec, &pk.sin, centre, &FanOptions::path()).expect("N")[0];
            ys.push((C64::new(a, b) / C64::new(pk.cos.data[centre], pk.sin.data[centre])).norm());
        }
        slopes.push(loglog_slope(&ks, &ys));
    }
    let slope_ok = slopes.iter().all(|s| (s + 1.0).abs() <= 0.2);
    let shown: Vec<String> = slopes.iter().map(|s| format!("{s:.3}")).collect();
    report(
        9,
        "symbol probes",
        lap_worst <= 0.15 && slope_ok,
        format!("Δ rank 0 worst relative {lap_worst:.3} (≤ 0.15) at 10 points; N slopes [{}] (−1 ± 0.2)", shown.join(", ")),
    )
}

fn experiment(rank: usize, f: f64, h: f64) -> ReconReport {
    let spec = MetricSpec::cone(X0, Link::Torus);
    let r = sinjectivity_experiment(&spec, rank, f, h, 1, &ExperimentOptions::default()).expect("experiment");
    println!(
        "     rank {rank} F={f} h={h}: error {:.3e}, gauge violation {:.2e}, data gap {:.2e}, {} iterations, {:.0} s",
        r.recovery_error, r.gauge_violation, r.data_gap, r.iterations, r.seconds
    );
    r
}

fn non_increasing(errs: &[f64]) -> bool {
    errs.windows(2).all(|w| w[1] <= w[0])
}

fn c10_recovery() -> Line {
    let r1: Vec<ReconReport> = [0.2, 0.1, 0.05].iter().map(|&h| experiment(1, 1.0, h)).collect();
    let r2: Vec<ReconReport> = [0.2, 0.1, 0.05].iter().map(|&h| experiment(2, 20.0, h)).collect();
    let a = &r1[1];
    let b = &r2[2];
    let e1: Vec<f64> = r1.iter().map(|r| r.recovery_error).collect();
    let e2: Vec<f64> = r2.iter().map(|r| r.recovery_error).collect();
    let ok1 = a.recovery_error <= 5e-3 && a.gauge_violation <= 1e-6 && a.seconds < 1800.0;
    let ok2 = b.recovery_error <= 2e-2 && b.seconds < 1800.0;
    let (t1, t2) = (non_increasing(&e1), non_increasing(&e2));
    let fmt = |e: &[f64]| e.iter().map(|v| format!("{v:.2e}")).collect::<Vec<_>>().join(" → ");
    report(
        10,
        "end-to-end recovery",
        ok1 && ok2 && t1 && t2,
        format!(
            "rank 1 error {:.2e} (≤ 5e-3), gauge {:.1e} (≤ 1e-6), {:.0} s; rank 2 error {:.2e} (≤ 2e-2), {:.0} s; h = 0.2, 0.1, 0.05 trend rank 1 [{}] non-increasing: {t1}, rank 2 [{}] non-increasing: {t2}",
            a.recovery_error,
            a.gauge_violation,
            a.seconds,
            b.recovery_error,
            b.seconds,
            fmt(&e1),
            fmt(&e2)
        ),
    )
}

fn main() {
    let checks: [fn() -> Line; 10] = [
        c1_conic_flow,
        c2_concavity,
        c3_conjugate,
        c4_potential_kernel,
        c5_symbols,
        c6_factorization,
        c7_margins,
        c8_gauge,
        c9_probes,
        c10_recovery,
    ];
    let lines: Vec<Line> = checks.iter().map(|c| c()).collect();
    println!("\nsummary");
    for l in &lines {
        println!("[{:>2}] {} {}", l.id, if l.pass { "PASS" } else { "FAIL" }, l.name);
    }
    let failed: Vec<&Line> = lines.iter().filter(|l| !l.pass).collect();
    if !failed.is_empty() {
        for l in &failed {
            eprintln!("criterion {} failed: {}", l.id, l.detail);
        }
        std::process::exit(1);
    }
}
