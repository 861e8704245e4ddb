//! Batch front end. Every run reads one TOML config (see [`crate::config`]),
//! applies command-line overrides, writes its artifacts under
//! `<output>/<command>/` and finishes with `manifest.toml`, which records the
//! effective config, its SHA-256, the crate version and every output file
//! with its size and hash.
//!
//! Exit codes: 0 success, 2 config or input error, 3 numerical failure,
//! 4 an acceptance threshold was missed.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{CommandFactory, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{is_blank, RunConfig};
use crate::error::{Error, Result};
use crate::field::{Grid, TensorField};
use crate::gauge::GaugeOperators;
use crate::geodesic::{
    concavity_alpha, cone_comparison, conjugate_scan, random_conic_inits, shoot, write_comparison_csv, ConeComparison,
};
use crate::geometry::{link_metric, Link, Regime};
use crate::recon::{sinjectivity_experiment, ExperimentOptions};
use crate::symbolics::{crossing, ellipticity_margin, margin_sweep, sigma_laplacian, CoefficientVariant, FiberPoint, MarginKind};
use crate::xray::{apply_path, fan_geodesics, potential_transform_check, Potential};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_ACCEPTANCE: i32 = 4;

/// Version of the manifest and report layouts.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "conic-tomo", version, about = "X-ray transform, gauge and reconstruction experiments on conic collars")]
pub struct Cli {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Tensor rank (overrides `params.rank`).
    #[arg(long, global = true)]
    pub rank: Option<usize>,
    /// Weight parameter F (overrides `params.f`).
    #[arg(long = "f", global = true)]
    pub f: Option<f64>,
    /// Semiclassical parameter h (overrides `params.h`).
    #[arg(long, global = true)]
    pub h: Option<f64>,
    /// Single seed (replaces `params.seeds`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Input artifact for `plot` (overrides `plot.input`).
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Integrate geodesics, compare with the exact conic flow, sample α and conjugate points.
    Geodesics,
    /// Forward transform-and-backproject of random fields, and the potential kernel check.
    Transform,
    /// Symbol tables, ellipticity margins and the F-sweep.
    Symbols,
    /// Gauge algebra diagnostics and projection solver history.
    Gauge,
    /// End-to-end recovery experiment.
    Reconstruct,
    /// SVG and two-column CSV from a prior CSV artifact.
    Plot,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Geodesics => "geodesics",
            Command::Transform => "transform",
            Command::Symbols => "symbols",
            Command::Gauge => "gauge",
            Command::Reconstruct => "reconstruct",
            Command::Plot => "plot",
        }
    }
}

/// Files written by a run and the acceptance checks it missed.
#[derive(Debug, Default)]
pub struct Outcome {
    pub dir: PathBuf,
    pub files: Vec<String>,
    pub failures: Vec<String>,
}

impl Outcome {
    fn new(dir: PathBuf) -> Result<Outcome> {
        std::fs::create_dir_all(&dir)?;
        Ok(Outcome { dir, ..Default::default() })
    }

    /// Create `name` in the run directory, fill it and register it.
    fn write<F>(&mut self, name: &str, fill: F) -> Result<()>
    where
        F: FnOnce(&mut BufWriter<File>) -> Result<()>,
    {
        let mut w = BufWriter::new(File::create(self.dir.join(name))?);
        fill(&mut w)?;
        w.flush()?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn check(&mut self, ok: bool, what: String) {
        if !ok {
            self.failures.push(what);
        }
    }
}

#[derive(Serialize)]
struct FileEntry {
    path: String,
    bytes: u64,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    crate_version: &'a str,
    format_version: u32,
    config_sha256: String,
    status: &'a str,
    failures: &'a [String],
    files: Vec<FileEntry>,
    config: &'a RunConfig,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_manifest(command: Command, cfg: &RunConfig, out: &Outcome) -> Result<()> {
    let mut files = Vec::new();
    for name in &out.files {
        let bytes = std::fs::read(out.dir.join(name))?;
        files.push(FileEntry { path: name.clone(), bytes: bytes.len() as u64, sha256: sha256_hex(&bytes) });
    }
    let m = Manifest {
        command: command.name(),
        crate_version: env!("CARGO_PKG_VERSION"),
        format_version: FORMAT_VERSION,
        config_sha256: sha256_hex(cfg.to_toml()?.as_bytes()),
        status: if out.failures.is_empty() { "ok" } else { "acceptance_failed" },
        failures: &out.failures,
        files,
        config: cfg,
    };
    let text = toml::to_string(&m).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(out.dir.join("manifest.toml"), text)?;
    Ok(())
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parameter(_) | Error::Unsupported(_) | Error::Io(_) => EXIT_CONFIG,
        _ => EXIT_NUMERICAL,
    }
}

/// Load the config named on the command line (or the defaults) and apply
/// the flag overrides.
pub fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            if is_blank(&text) {
                return Err(Error::Config(format!("config {} is empty", path.display())));
            }
            RunConfig::parse(&text).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
                other => other,
            })?
        }
        None => RunConfig::default(),
    };
    if let Some(o) = &cli.out {
        cfg.output = o.to_string_lossy().into_owned();
    }
    if let Some(r) = cli.rank {
        cfg.params.rank = r;
    }
    if let Some(f) = cli.f {
        cfg.params.f = f;
    }
    if let Some(h) = cli.h {
        cfg.params.h = h;
    }
    if let Some(s) = cli.seed {
        cfg.params.seeds = vec![s];
    }
    if let Some(i) = &cli.input {
        cfg.plot.input = Some(i.to_string_lossy().into_owned());
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Run one command and write its manifest.
pub fn run(command: Command, cfg: &RunConfig) -> Result<Outcome> {
    let dir = Path::new(&cfg.output).join(command.name());
    let mut out = Outcome::new(dir)?;
    match command {
        Command::Geodesics => geodesics(cfg, &mut out)?,
        Command::Transform => transform(cfg, &mut out)?,
        Command::Symbols => symbols(cfg, &mut out)?,
        Command::Gauge => gauge(cfg, &mut out)?,
        Command::Reconstruct => reconstruct(cfg, &mut out)?,
        Command::Plot => plot(cfg, &mut out)?,
    }
    write_manifest(command, cfg, &out)?;
    Ok(out)
}

/// Entry point shared by the binary and the tests; returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("{}", Cli::command().render_help());
            return exit_code(&e);
        }
    };
    match run(cli.command, &cfg) {
        Ok(out) => {
            println!("{}: {} files in {}", cli.command.name(), out.files.len() + 1, out.dir.display());
            if out.failures.is_empty() {
                EXIT_OK
            } else {
                for f in &out.failures {
                    eprintln!("acceptance: {f}");
                }
                EXIT_ACCEPTANCE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn seed0(cfg: &RunConfig) -> u64 {
    cfg.params.seeds[0]
}

fn torus_grid(cfg: &RunConfig) -> Result<Arc<Grid>> {
    if cfg.metric.link != Link::Torus {
        return Err(Error::Unsupported("field grids are built on the torus link".into()));
    }
    let mut g = Grid::torus(cfg.metric.x0, cfg.grid.nx, cfg.grid.n1, cfg.grid.n2)?;
    g.p = cfg.metric.p_exponent;
    Ok(Arc::new(g))
}

fn geodesics(cfg: &RunConfig, out: &mut Outcome) -> Result<()> {
    use rand::{Rng, SeedableRng};
    use std::f64::consts::{PI, TAU};
    let gs = &cfg.geodesics;
    let spec = &cfg.metric;
    let seed = seed0(cfg);
    let t0 = Instant::now();
    let inits = random_conic_inits(spec.link, spec.x0, gs.n_init, seed);
    for (k, init) in inits.iter().take(gs.dump_paths).enumerate() {
        let p = shoot(spec, &init.state(), gs.tol)?;
        out.write(&format!("path_{k:03}.csv"), |w| p.write_csv(w))?;
    }
    let rows: Option<Vec<ConeComparison>> = if spec.perturbation.is_empty() {
        Some(cone_comparison(spec, gs.n_init, seed, gs.tol, gs.margin)?)
    } else {
        None
    };
    if let Some(rows) = &rows {
        out.write("comparison.csv", |w| write_comparison_csv(rows, w))?;
    }

    // α at λ = 0 over random collar points
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xa1fa);
    let mut alphas = Vec::with_capacity(gs.n_init);
    for _ in 0..gs.n_init {
        let x = spec.x0 * rng.random_range(0.05..0.9);
        let y = match spec.link {
            Link::Torus => [rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)],
            Link::Sphere => [rng.random_range(0.4..PI - 0.4), rng.random_range(0.0..TAU)],
        };
        let a = rng.random_range(0.0..TAU);
        let (g, _) = link_metric(spec.link, y);
        let om = [a.cos() / g[(0, 0)].sqrt(), a.sin() / g[(1, 1)].sqrt()];
        alphas.push((x, y, om, concavity_alpha(spec, x, y, 0.0, om)?));
    }
    out.write("concavity.csv", |w| {
        let mut wr = csv::Writer::from_writer(w);
        let e = crate::geodesic::csv_err;
        wr.write_record(["x", "y1", "y2", "omega1", "omega2", "alpha", "alpha_analytic", "residual"]).map_err(e)?;
        for (x, y, om, fit) in &alphas {
            wr.write_record([*x, y[0], y[1], om[0], om[1], fit.alpha, fit.alpha_analytic, fit.residual].map(|v| v.to_string()))
                .map_err(e)?;
        }
        wr.flush()?;
        Ok(())
    })?;
    let n_pos = alphas.iter().filter(|a| !(a.3.alpha < 0.0)).count();

    let conj = match spec.link {
        Link::Sphere => conjugate_scan(spec.link, [PI / 2.0, 0.0], [1.0, 0.0], PI)?,
        Link::Torus => conjugate_scan(spec.link, [0.0, 0.0], [1.0, 0.0], PI)?,
    };
    let seconds = t0.elapsed().as_secs_f64();
    let max_error = rows.as_ref().map(|r| r.iter().map(|c| c.max_error).fold(0.0, f64::max));
    let drift = rows.as_ref().map(|r| r.iter().map(|c| c.max_energy_drift).fold(0.0, f64::max));
    out.write("summary.txt", |w| {
        writeln!(w, "link = {:?}", spec.link)?;
        writeln!(w, "n_init = {}", gs.n_init)?;
        if let (Some(m), Some(d)) = (max_error, drift) {
            writeln!(w, "max_error = {m:e}")?;
            writeln!(w, "max_energy_drift = {d:e}")?;
        }
        writeln!(w, "alpha_nonnegative = {n_pos}")?;
        match conj {
            Some(d) => writeln!(w, "first_conjugate_distance = {d:.12}")?,
            None => writeln!(w, "first_conjugate_distance = none")?,
        }
        writeln!(w, "seconds = {seconds:.3}")?;
        Ok(())
    })?;
    if let Some(m) = max_error {
        out.check(m < gs.max_error, format!("closed-form max error {m:e} ≥ {:e}", gs.max_error));
    }
    out.check(n_pos == 0, format!("{n_pos} collar points with α ≥ 0"));
    Ok(())
}

fn transform(cfg: &RunConfig, out: &mut Outcome) -> Result<()> {
    let p = &cfg.params;
    let grid = torus_grid(cfg)?;
    let mut kernel_rows = Vec::new();
    for &seed in &p.seeds {
        let field = TensorField::random_smooth(grid.clone(), p.rank, p.f, p.h, seed)?;
        let (data, stats) = apply_path(&cfg.metric, &field, &cfg.transform.fan)?;
        out.write(&format!("field_{seed}.bin"), |w| field.write_binary(w))?;
        out.write(&format!("data_{seed}.bin"), |w| data.write_binary(w))?;
        out.write(&format!("data_{seed}.csv"), |w| data.write_csv(w))?;
        out.write(&format!("stats_{seed}.txt"), |w| {
            writeln!(w, "field_norm = {:e}", field.norm())?;
            writeln!(w, "data_norm = {:e}", data.norm())?;
            writeln!(w, "{stats:?}")?;
            Ok(())
        })?;
        if p.rank >= 1 {
            let pot = Potential::random(p.rank - 1, cfg.metric.x0, seed)?;
            for (xk, y) in [(0.3, [0.0, 0.0]), (0.5, [1.0, 2.0]), (0.7, [3.0, 0.5])] {
                let x = xk * cfg.metric.x0;
                let f = &cfg.transform.fan;
                let paths = fan_geodesics(&cfg.metric, x, y, p.f, p.h, 4, 8, f.tol)?;
                let (worst, scale) = potential_transform_check(&cfg.metric, &pot, &paths)?;
                kernel_rows.push((seed, x, y, worst, scale));
            }
        }
    }
    if !kernel_rows.is_empty() {
        out.write("potential_kernel.csv", |w| {
            let mut wr = csv::Writer::from_writer(w);
            let e = crate::geodesic::csv_err;
            wr.write_record(["seed", "x", "y1", "y2", "max_abs_transform", "scale", "ratio"]).map_err(e)?;
            for (seed, x, y, worst, scale) in &kernel_rows {
                let ratio = worst / scale.max(f64::MIN_POSITIVE);
                wr.write_record([seed.to_string(), x.to_string(), y[0].to_string(), y[1].to_string(), worst.to_string(), scale.to_string(), ratio.to_string()])
                    .map_err(e)?;
            }
            wr.flush()?;
            Ok(())
        })?;
        let worst = kernel_rows.iter().map(|r| r.3 / r.4.max(f64::MIN_POSITIVE)).fold(0.0, f64::max);
        out.check(worst <= 1e-5, format!("potential transform ratio {worst:e} > 1e-5"));
    }
    Ok(())
}

fn symbols(cfg: &RunConfig, out: &mut Outcome) -> Result<()> {
    let s = &cfg.symbols;
    let p = &cfg.params;
    let sample = s.sample_spec();
    let mut fs = s.f_values.clone();
    if !fs.contains(&p.f) {
        fs.push(p.f);
    }
    fs.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));

    // σ(Δ) on the tabulated fiber points; rank 0 is a scalar
    let table_rank = p.rank.min(1);
    out.write("table.csv", |w| {
        let mut wr = csv::Writer::from_writer(w);
        let e = crate::geodesic::csv_err;
        wr.write_record(["rank", "regime", "f", "xi", "eta1", "eta2", "value", "min_eig", "max_eig"]).map_err(e)?;
        for &f in &fs {
            for regime in [Regime::OneCusp, Regime::Scattering] {
                let x = if regime == Regime::OneCusp { sample.x_1c } else { sample.x_sc };
                for &[xi, e1, e2] in &s.table {
                    let pt = FiberPoint::model(regime, x, xi, [e1, e2], f);
                    let m = sigma_laplacian(&pt, table_rank)?;
                    let herm = nalgebra::SymmetricEigen::new(m.hermitian_part()).eigenvalues;
                    let value = if table_rank == 0 { m.m[(0, 0)].re.to_string() } else { String::new() };
                    wr.write_record([
                        table_rank.to_string(),
                        format!("{regime:?}"),
                        f.to_string(),
                        xi.to_string(),
                        e1.to_string(),
                        e2.to_string(),
                        value,
                        herm.min().to_string(),
                        herm.max().to_string(),
                    ])
                    .map_err(e)?;
                }
            }
        }
        wr.flush()?;
        Ok(())
    })?;
    if p.rank == 0 {
        return Ok(());
    }
    let report = ellipticity_margin(p.rank, p.f, &sample, s.kind, CoefficientVariant::Adjoint)?;
    out.write("margins.csv", |w| report.write_csv(w))?;
    let sweep = margin_sweep(p.rank, &fs, &sample, s.kind, CoefficientVariant::Adjoint)?;
    out.write("sweep.csv", |w| {
        let mut wr = csv::Writer::from_writer(w);
        let e = crate::geodesic::csv_err;
        wr.write_record(["f", "margin", "finite_margin", "infinity_margin", "worst_xi", "worst_eta1", "worst_eta2"]).map_err(e)?;
        for sp in &sweep {
            wr.write_record(
                [sp.f, sp.margin, sp.finite_margin, sp.infinity_margin, sp.worst_xi, sp.worst_eta[0], sp.worst_eta[1]].map(|v| v.to_string()),
            )
            .map_err(e)?;
        }
        wr.flush()?;
        Ok(())
    })?;
    let cross = crossing(&sweep);
    out.write("summary.txt", |w| {
        writeln!(w, "rank = {}", p.rank)?;
        writeln!(w, "f = {}", p.f)?;
        writeln!(w, "kind = {}", match s.kind {
            MarginKind::Kernel => "kernel".to_string(),
            MarginKind::Combined { m0 } => format!("combined(m0 = {m0})"),
        })?;
        writeln!(w, "margin = {:e}", report.margin)?;
        writeln!(w, "finite_margin = {:e}", report.finite_margin)?;
        writeln!(w, "infinity_margin = {:e}", report.infinity_margin)?;
        writeln!(w, "worst = ({:?}, xi {}, eta [{}, {}])", report.worst.regime, report.worst.xi, report.worst.eta[0], report.worst.eta[1])?;
        match cross {
            Some(f) => writeln!(w, "sweep_crossing_f = {f}")?,
            None => writeln!(w, "sweep_crossing_f = none")?,
        }
        Ok(())
    })?;
    out.check(report.margin > 0.0, format!("rank-{} margin {:e} ≤ 0 at F = {}", p.rank, report.margin, p.f));
    Ok(())
}

fn gauge(cfg: &RunConfig, out: &mut Outcome) -> Result<()> {
    let p = &cfg.params;
    if p.rank == 0 {
        return Err(Error::Config("gauge needs params.rank 1 or 2".into()));
    }
    let grid = torus_grid(cfg)?;
    let ops = GaugeOperators::new(&cfg.metric, grid, p.rank, p.f, p.h)?;
    let tol = cfg.gauge.tol;
    let d = ops.diagnostics(tol, seed0(cfg))?;
    let (lo, hi) = ops.spectrum_estimate(cfg.gauge.spectrum_iterations, seed0(cfg))?;
    out.write("solver.csv", |w| d.solve.write_csv(w))?;
    out.write("gauge.txt", |w| {
        d.write_text(&mut *w)?;
        writeln!(w, "lambda_min = {lo:e}")?;
        writeln!(w, "lambda_max = {hi:e}")?;
        writeln!(w, "condition = {:e}", hi / lo)?;
        Ok(())
    })?;
    out.check(d.adjointness <= 1e-12, format!("adjointness defect {:e}", d.adjointness));
    out.check(d.solenoidal <= 10.0 * tol, format!("‖δSf‖/‖f‖ = {:e}", d.solenoidal));
    out.check(d.potential <= 10.0 * tol, format!("‖Sdv‖/‖v‖ = {:e}", d.potential));
    out.check(d.idempotence <= 20.0 * tol, format!("‖SSf − Sf‖/‖f‖ = {:e}", d.idempotence));
    Ok(())
}

fn reconstruct(cfg: &RunConfig, out: &mut Outcome) -> Result<()> {
    let p = &cfg.params;
    let r = &cfg.reconstruct;
    if p.rank == 0 {
        return Err(Error::Config("reconstruct needs params.rank 1 or 2".into()));
    }
    let opts = ExperimentOptions {
        grid: [cfg.grid.nx, cfg.grid.n1, cfg.grid.n2],
        m0: r.m0,
        tol: r.tol,
        max_iter: r.max_iter,
        noise: r.noise,
    };
    for &seed in &p.seeds {
        let rep = sinjectivity_experiment(&cfg.metric, p.rank, p.f, p.h, seed, &opts)?;
        out.write(&format!("recon_{seed}.txt"), |w| rep.write_text(w))?;
        out.write(&format!("residuals_{seed}.csv"), |w| rep.write_csv(w))?;
        if let Some(m) = r.max_error {
            out.check(rep.recovery_error <= m, format!("seed {seed}: recovery error {:e} > {m:e}", rep.recovery_error));
        }
    }
    Ok(())
}

fn plot(cfg: &RunConfig, out: &mut Outcome) -> Result<()> {
    let pl = &cfg.plot;
    let input = pl.input.as_ref().ok_or_else(|| Error::Config("plot needs an input artifact (plot.input or --input)".into()))?;
    let path = Path::new(input);
    if !path.is_file() {
        return Err(Error::Config(format!("missing input artifact: {input}")));
    }
    let mut rd = csv::Reader::from_path(path).map_err(|e| Error::Config(format!("cannot read {input}: {e}")))?;
    let headers = rd.headers().map_err(crate::geodesic::csv_err)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("{input} has no column {name:?} (columns: {})", headers.iter().collect::<Vec<_>>().join(", "))))
    };
    let (ix, iy) = (col(&pl.x_column)?, col(&pl.y_column)?);
    let mut pts = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(crate::geodesic::csv_err)?;
        let parse = |i: usize| rec.get(i).and_then(|s| s.trim().parse::<f64>().ok());
        if let (Some(x), Some(y)) = (parse(ix), parse(iy)) {
            let y = if pl.log_y { y.abs().log10() } else { y };
            if x.is_finite() && y.is_finite() {
                pts.push((x, y));
            }
        }
    }
    if pts.is_empty() {
        return Err(Error::Config(format!("{input}: no numeric rows in columns {} / {}", pl.x_column, pl.y_column)));
    }
    let stem = path.file_stem().map_or("plot".into(), |s| s.to_string_lossy().into_owned());
    let ylab = if pl.log_y { format!("log10 |{}|", pl.y_column) } else { pl.y_column.clone() };
    out.write(&format!("{stem}.svg"), |w| write_svg(w, &pts, &pl.x_column, &ylab))?;
    out.write(&format!("{stem}_xy.csv"), |w| {
        let mut wr = csv::Writer::from_writer(w);
        let e = crate::geodesic::csv_err;
        wr.write_record([pl.x_column.as_str(), ylab.as_str()]).map_err(e)?;
        for (x, y) in &pts {
            wr.write_record([x.to_string(), y.to_string()]).map_err(e)?;
        }
        wr.flush()?;
        Ok(())
    })?;
    Ok(())
}

fn write_svg<W: Write>(w: &mut W, pts: &[(f64, f64)], xlab: &str, ylab: &str) -> Result<()> {
    let (w_px, h_px, pad) = (640.0, 400.0, 50.0);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 - x0 <= 0.0 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 <= 0.0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w_px - 2.0 * pad);
    let sy = |y: f64| h_px - pad - (y - y0) / (y1 - y0) * (h_px - 2.0 * pad);
    writeln!(w, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w_px}" height="{h_px}" font-family="sans-serif" font-size="12">"#)?;
    writeln!(w, r#"<rect x="{pad}" y="{pad}" width="{}" height="{}" fill="none" stroke="black"/>"#, w_px - 2.0 * pad, h_px - 2.0 * pad)?;
    let line: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
    writeln!(w, r#"<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{}"/>"#, line.join(" "))?;
    writeln!(w, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, w_px / 2.0, h_px - 10.0, escape(xlab))?;
    writeln!(w, r#"<text x="15" y="{}" transform="rotate(-90 15 {})" text-anchor="middle">{}</text>"#, h_px / 2.0, h_px / 2.0, escape(ylab))?;
    writeln!(w, r#"<text x="{pad}" y="{}">{x0:.4e}</text><text x="{}" y="{}" text-anchor="end">{x1:.4e}</text>"#, h_px - pad + 15.0, w_px - pad, h_px - pad + 15.0)?;
    writeln!(w, r#"<text x="{}" y="{}" text-anchor="end">{y0:.4e}</text><text x="{}" y="{}" text-anchor="end">{y1:.4e}</text>"#, pad - 4.0, h_px - pad, pad - 4.0, pad + 4.0)?;
    writeln!(w, "</svg>")?;
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
