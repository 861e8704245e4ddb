//! Declarative run configuration, read from a TOML file.
//!
//! Every section is optional and falls back to its default. Unknown keys are
//! rejected at every level. Example:
//!
//! ```toml
//! output = "out"
//!
//! [metric]
//! x0 = 0.5
//! link = "torus"          # or "sphere"
//! p_exponent = 1.0
//!
//! [grid]
//! nx = 24
//! n1 = 16
//! n2 = 16
//!
//! [params]
//! f = 1.0
//! h = 0.1
//! rank = 1
//! seeds = [1]
//!
//! [geodesics]
//! n_init = 50
//! tol = 1e-11
//! margin = 0.05
//! dump_paths = 3
//! max_error = 1e-6
//!
//! [transform.fan]
//! n_lambda = 16
//! n_omega = 32
//! route = "path"
//! step = 0.5
//! tol = 1e-10
//!
//! [symbols]
//! f_values = [0.1, 0.5, 1.0, 3.0, 5.0, 10.0, 20.0]
//! kind = { type = "kernel" }
//! axis_points = 17
//! axis_radius = 1e3
//! infinity_dirs = 64
//! table = [[1.0, 2.0, 0.0], [0.0, 1.0, 1.0]]
//!
//! [gauge]
//! tol = 1e-10
//! spectrum_iterations = 60
//!
//! [reconstruct]
//! tol = 1e-8
//! max_iter = 400
//! noise = 0.0
//! # m0 = 1.0          # omitted: balanced automatically
//! # max_error = 5e-3  # optional acceptance threshold
//!
//! [plot]
//! input = "out/geodesics/path_000.csv"
//! x_column = "t"
//! y_column = "x"
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Link, MetricSpec};
use crate::symbolics::{MarginKind, SampleSpec};
use crate::xray::FanOptions;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_output")]
    pub output: String,
    #[serde(default = "default_metric")]
    pub metric: MetricSpec,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub params: Params,
    #[serde(default)]
    pub geodesics: GeodesicsSection,
    #[serde(default)]
    pub transform: TransformSection,
    #[serde(default)]
    pub symbols: SymbolsSection,
    #[serde(default)]
    pub gauge: GaugeSection,
    #[serde(default)]
    pub reconstruct: ReconstructSection,
    #[serde(default)]
    pub plot: PlotSection,
}

fn default_output() -> String {
    "out".into()
}

fn default_metric() -> MetricSpec {
    MetricSpec::cone(0.5, Link::Torus)
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output: default_output(),
            metric: default_metric(),
            grid: GridSection::default(),
            params: Params::default(),
            geodesics: GeodesicsSection::default(),
            transform: TransformSection::default(),
            symbols: SymbolsSection::default(),
            gauge: GaugeSection::default(),
            reconstruct: ReconstructSection::default(),
            plot: PlotSection::default(),
        }
    }
}

/// Torus collar grid: `nx` x-levels and an `n1 × n2` link mesh.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub nx: usize,
    pub n1: usize,
    pub n2: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection { nx: 24, n1: 16, n2: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Params {
    pub f: f64,
    pub h: f64,
    pub rank: usize,
    pub seeds: Vec<u64>,
}

impl Default for Params {
    fn default() -> Self {
        Params { f: 1.0, h: 0.1, rank: 1, seeds: vec![1] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeodesicsSection {
    pub n_init: usize,
    pub tol: f64,
    /// Distance kept from the ends of the exact flow's `r`-interval.
    pub margin: f64,
    /// Number of integrated paths written out in full.
    pub dump_paths: usize,
    /// Exit with the acceptance code when the comparison error reaches this.
    pub max_error: f64,
}

impl Default for GeodesicsSection {
    fn default() -> Self {
        GeodesicsSection { n_init: 50, tol: 1e-11, margin: 0.05, dump_paths: 3, max_error: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformSection {
    pub fan: FanOptions,
}

impl Default for TransformSection {
    fn default() -> Self {
        TransformSection { fan: FanOptions::path() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SymbolsSection {
    /// Values of `F` for the margin sweep and the symbol table.
    pub f_values: Vec<f64>,
    pub kind: MarginKind,
    pub axis_points: usize,
    pub axis_radius: f64,
    pub infinity_dirs: usize,
    /// Fiber points `(ξ, η₁, η₂)` tabulated for every `F`.
    pub table: Vec<[f64; 3]>,
}

impl Default for SymbolsSection {
    fn default() -> Self {
        SymbolsSection {
            f_values: vec![0.1, 0.5, 1.0, 3.0, 5.0, 10.0, 20.0],
            kind: MarginKind::Kernel,
            axis_points: 17,
            axis_radius: 1e3,
            infinity_dirs: 64,
            table: vec![[1.0, 2.0, 0.0], [0.0, 1.0, 1.0], [2.0, 0.5, -1.0]],
        }
    }
}

impl SymbolsSection {
    pub fn sample_spec(&self) -> SampleSpec {
        SampleSpec::log_grid(self.axis_points, self.axis_radius, self.infinity_dirs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaugeSection {
    pub tol: f64,
    pub spectrum_iterations: usize,
}

impl Default for GaugeSection {
    fn default() -> Self {
        GaugeSection { tol: 1e-10, spectrum_iterations: 60 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconstructSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m0: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
    pub noise: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_error: Option<f64>,
}

impl Default for ReconstructSection {
    fn default() -> Self {
        ReconstructSection { m0: None, tol: 1e-8, max_iter: 400, noise: 0.0, max_error: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlotSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    pub x_column: String,
    pub y_column: String,
    pub log_y: bool,
}

impl Default for PlotSection {
    fn default() -> Self {
        PlotSection { input: None, x_column: "t".into(), y_column: "x".into(), log_y: false }
    }
}

/// 1-based line and column of a byte offset.
pub fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let offset = offset.min(text.len());
    let before = &text[..offset];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, col)
}

/// True when the text holds nothing but whitespace and comments.
pub fn is_blank(text: &str) -> bool {
    text.lines().all(|l| {
        let t = l.trim();
        t.is_empty() || t.starts_with('#')
    })
}

impl RunConfig {
    /// Parse and validate. Parse errors carry the line and column.
    pub fn parse(text: &str) -> Result<RunConfig> {
        if is_blank(text) {
            return Err(Error::Config("empty config".into()));
        }
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().trim().to_string();
            match e.span() {
                Some(span) => {
                    let (l, c) = line_column(text, span.start);
                    Error::Config(format!("line {l}, column {c}: {msg}"))
                }
                None => Error::Config(msg),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.metric.validate().map_err(|e| Error::Config(format!("metric: {e}")))?;
        if self.output.is_empty() {
            return bad("output directory must be non-empty".into());
        }
        let g = &self.grid;
        if g.nx < 4 || g.n1 < 4 || g.n2 < 4 {
            return bad(format!("grid {}×{}×{} needs at least 4 nodes per axis", g.nx, g.n1, g.n2));
        }
        let p = &self.params;
        if !(p.f > 0.0 && p.f.is_finite()) {
            return bad(format!("params.f = {} must be positive", p.f));
        }
        if !(p.h > 0.0 && p.h < 1.0) {
            return bad(format!("params.h = {} must lie in (0, 1)", p.h));
        }
        if p.rank > 2 {
            return bad(format!("params.rank = {} must be 0, 1 or 2", p.rank));
        }
        if p.seeds.is_empty() {
            return bad("params.seeds must list at least one seed".into());
        }
        let gs = &self.geodesics;
        if !(gs.tol > 0.0) || !(gs.margin > 0.0 && gs.margin < 0.5) || gs.n_init == 0 {
            return bad("geodesics: need n_init ≥ 1, tol > 0 and margin in (0, 0.5)".into());
        }
        let fan = &self.transform.fan;
        if fan.n_lambda == 0 || fan.n_omega == 0 || !(fan.step > 0.0) || !(fan.tol > 0.0) {
            return bad("transform.fan: counts, step and tol must be positive".into());
        }
        let s = &self.symbols;
        if s.f_values.iter().any(|f| !(*f > 0.0)) || s.axis_points < 3 || !(s.axis_radius > 1e-2) {
            return bad("symbols: f_values must be positive, axis_points ≥ 3, axis_radius > 0.01".into());
        }
        if let MarginKind::Combined { m0 } = s.kind {
            if !(m0 > 0.0) {
                return bad(format!("symbols.kind.m0 = {m0} must be positive"));
            }
        }
        if !(self.gauge.tol > 0.0) {
            return bad("gauge.tol must be positive".into());
        }
        let r = &self.reconstruct;
        if matches!(r.m0, Some(m) if !(m > 0.0 && m.is_finite())) {
            return bad("reconstruct.m0 must be positive".into());
        }
        if !(r.tol > 0.0) || r.max_iter == 0 || !(r.noise >= 0.0) {
            return bad("reconstruct: need tol > 0, max_iter ≥ 1, noise ≥ 0".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{PerturbationKind, PerturbationTerm, Profile};
    use proptest::prelude::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected_with_position() {
        let e = RunConfig::parse("output = \"o\"\n[grid]\nnx = 8\nbogus = 1\n").unwrap_err();
        let m = e.to_string();
        assert!(m.contains("line 4, column 1"), "{m}");
        assert!(m.contains("bogus"), "{m}");
        let e = RunConfig::parse("[metric]\nx0 = 0.5\nlink = \"torus\"\nextra = 2\n").unwrap_err();
        assert!(e.to_string().contains("line 4"), "{e}");
    }

    #[test]
    fn syntax_errors_report_position() {
        let e = RunConfig::parse("[params]\nf = 1.0\nh = = 2\n").unwrap_err();
        assert!(e.to_string().contains("line 3"), "{e}");
    }

    #[test]
    fn empty_and_invalid_configs_fail() {
        assert!(matches!(RunConfig::parse(""), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("  \n# only a comment\n"), Err(Error::Config(_))));
        assert!(RunConfig::parse("[params]\nrank = 3\n").is_err());
        assert!(RunConfig::parse("[params]\nh = 1.5\n").is_err());
        assert!(RunConfig::parse("[reconstruct]\nm0 = -1.0\n").is_err());
        assert!(RunConfig::parse("[metric]\nx0 = 1.5\nlink = \"sphere\"\n").is_err());
    }

    #[test]
    fn sections_fall_back_to_defaults() {
        let c = RunConfig::parse("[params]\nf = 20.0\nrank = 2\n").unwrap();
        assert_eq!(c.params.f, 20.0);
        assert_eq!(c.params.h, Params::default().h);
        assert_eq!(c.grid, GridSection::default());
    }

    #[test]
    fn line_column_counts_from_one() {
        assert_eq!(line_column("ab\ncd", 0), (1, 1));
        assert_eq!(line_column("ab\ncd", 4), (2, 2));
    }

    fn finite() -> impl Strategy<Value = f64> {
        prop_oneof![1e-6f64..1e3, -1e3f64..-1e-6]
    }

    fn config() -> impl Strategy<Value = RunConfig> {
        (
            (0.05f64..0.95, prop::bool::ANY, 0.5f64..2.0, prop::option::of((finite(), 0u32..4, -3i32..4))),
            (4usize..40, 4usize..40, 4usize..40),
            (1e-3f64..50.0, 1e-3f64..0.99, 0usize..3, prop::collection::vec(any::<u64>(), 1..4)),
            (1usize..100, 1e-14f64..1e-4, 0.01f64..0.49, 0usize..10, 1e-12f64..1.0),
            (prop::collection::vec(1e-3f64..100.0, 0..6), prop::option::of(1e-3f64..10.0), 3usize..30),
            (prop::option::of(1e-6f64..1e6), 1e-14f64..1e-2, 1usize..5000, 0.0f64..1.0, prop::option::of(1e-9f64..1.0)),
            (prop::option::of("[a-z]{1,8}\\.csv"), prop::bool::ANY),
        )
            .prop_map(|(m, g, p, geo, sym, rec, plot)| {
                let mut metric = MetricSpec::cone(m.0, if m.1 { Link::Torus } else { Link::Sphere });
                metric.p_exponent = m.2;
                if let Some((amp, k, mode)) = m.3 {
                    metric = metric.with_term(PerturbationTerm {
                        kind: PerturbationKind::Conformal,
                        amplitude: amp * 1e-3,
                        x_power: k + 1,
                        profile: if m.1 {
                            Profile::Fourier { modes: [mode, 1], phase: amp }
                        } else {
                            Profile::Zonal { axis: [amp, 1.0, 0.5], degree: k }
                        },
                    });
                }
                RunConfig {
                    output: "runs/x".into(),
                    metric,
                    grid: GridSection { nx: g.0, n1: g.1, n2: g.2 },
                    params: Params { f: p.0, h: p.1, rank: p.2, seeds: p.3 },
                    geodesics: GeodesicsSection { n_init: geo.0, tol: geo.1, margin: geo.2, dump_paths: geo.3, max_error: geo.4 },
                    transform: TransformSection::default(),
                    symbols: SymbolsSection {
                        f_values: sym.0,
                        kind: sym.1.map_or(MarginKind::Kernel, |m0| MarginKind::Combined { m0 }),
                        axis_points: sym.2,
                        ..SymbolsSection::default()
                    },
                    gauge: GaugeSection::default(),
                    reconstruct: ReconstructSection { m0: rec.0, tol: rec.1, max_iter: rec.2, noise: rec.3, max_error: rec.4 },
                    plot: PlotSection { input: plot.0, log_y: plot.1, ..PlotSection::default() },
                }
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn serialize_parse_is_identity(c in config()) {
            let text = c.to_toml().unwrap();
            let back = RunConfig::parse(&text);
            prop_assert!(back.is_ok(), "{:?}\n{}", back.err(), text);
            prop_assert_eq!(back.unwrap(), c);
        }
    }
}
