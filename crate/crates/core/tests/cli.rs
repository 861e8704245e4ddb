use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use conic_tomo::cli::sha256_hex;

const BIN: &str = env!("CARGO_BIN_EXE_conic-tomo");

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("conic-tomo-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn binary")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(dir: &Path) -> toml::Value {
    toml::from_str(&std::fs::read_to_string(dir.join("manifest.toml")).unwrap()).unwrap()
}

const SMALL: &str = "[grid]\nnx = 8\nn1 = 4\nn2 = 4\n[params]\nrank = 1\nseeds = [3]\n";

#[test]
fn empty_config_is_a_config_error_with_usage() {
    let d = scratch("empty");
    let cfg = d.join("empty.toml");
    std::fs::write(&cfg, "  \n# nothing\n").unwrap();
    let o = run(&["geodesics", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("empty") && err.contains("Usage"), "{err}");
}

#[test]
fn config_errors_report_line_and_column() {
    let d = scratch("badkey");
    let cfg = d.join("bad.toml");
    std::fs::write(&cfg, "[params]\nf = 1.0\nwobble = 2\n").unwrap();
    let o = run(&["symbols", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3") && err.contains("wobble"), "{err}");
}

#[test]
fn bad_parameters_exit_with_the_config_code() {
    let d = scratch("badh");
    let o = run(&["symbols", "--out", s(&d), "--h", "-1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["plot", "--out", s(&d), "--input", s(&d.join("missing.csv"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing input artifact"));
}

#[test]
fn scalar_symbol_table_has_the_laplacian_value() {
    let d = scratch("symbols");
    let o = run(&["symbols", "--out", s(&d), "--rank", "0", "--f", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(d.join("symbols/table.csv")).unwrap();
    // ξ = 1, η = (2, 0), F = 3: 1 + 9 + 4
    assert!(table.lines().any(|l| l.starts_with("0,") && l.contains(",3,1,2,0,14,")), "{table}");
}

#[test]
fn geodesics_match_the_cone_and_the_manifest_is_complete() {
    let d = scratch("geo");
    let o = run(&["geodesics", "--out", s(&d)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = d.join("geodesics");
    let mut rd = csv::Reader::from_path(dir.join("comparison.csv")).unwrap();
    let col = rd.headers().unwrap().iter().position(|h| h == "max_error").unwrap();
    let mut n = 0;
    for r in rd.records() {
        let e: f64 = r.unwrap()[col].parse().unwrap();
        assert!(e < 1e-6);
        n += 1;
    }
    assert_eq!(n, 50);

    let m = manifest(&dir);
    assert_eq!(m["command"].as_str(), Some("geodesics"));
    assert_eq!(m["status"].as_str(), Some("ok"));
    assert_eq!(m["format_version"].as_integer(), Some(1));
    let files = m["files"].as_array().unwrap();
    for name in ["comparison.csv", "concavity.csv", "summary.txt", "path_000.csv"] {
        assert!(files.iter().any(|f| f["path"].as_str() == Some(name)), "{name} missing");
    }
    for f in files {
        let bytes = std::fs::read(dir.join(f["path"].as_str().unwrap())).unwrap();
        assert_eq!(f["bytes"].as_integer(), Some(bytes.len() as i64));
        assert_eq!(f["sha256"].as_str(), Some(sha256_hex(&bytes).as_str()));
    }
}

#[test]
fn transform_is_deterministic_per_seed() {
    let d = scratch("det");
    let cfg = d.join("small.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let mut dumps = Vec::new();
    for k in 0..2 {
        let out = d.join(format!("run{k}"));
        let o = run(&["transform", "--config", s(&cfg), "--out", s(&out)]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let dir = out.join("transform");
        dumps.push(["data_3.bin", "data_3.csv", "field_3.bin", "potential_kernel.csv"].map(|n| std::fs::read(dir.join(n)).unwrap()));
    }
    assert!(dumps[0] == dumps[1]);
}

#[test]
fn gauge_run_passes_its_checks() {
    let d = scratch("gauge");
    let cfg = d.join("small.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let o = run(&["gauge", "--config", s(&cfg), "--out", s(&d)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(d.join("gauge/gauge.txt")).unwrap();
    assert!(text.contains("adjointness = "));
    assert_eq!(manifest(&d.join("gauge"))["status"].as_str(), Some("ok"));
}
