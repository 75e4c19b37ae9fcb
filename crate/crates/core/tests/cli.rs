use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn data(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(rel)
}

fn gasnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gasnet"))
        .args(args)
        .output()
        .unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// Writes noiseless six-junction readings into `dir` and returns their path.
fn synthetic(dir: &Path) -> PathBuf {
    let out = dir.join("synthetic");
    let o = gasnet(&[
        "gen-synthetic",
        "--network",
        path(&data("six_node/network.json")),
        "--profiles",
        path(&data("six_node/profiles.csv")),
        "--nt",
        "12",
        "--out",
        path(&out),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    out.join("measurements.csv")
}

fn estimate(dir: &Path, measurements: &Path, extra: &[&str]) -> Output {
    let network = data("six_node/network.json");
    let mut args = vec![
        "estimate",
        "--network",
        path(&network),
        "--measurements",
        path(measurements),
        "--nt",
        "12",
        "--out",
        path(dir),
    ];
    args.extend_from_slice(extra);
    gasnet(&args)
}

#[test]
fn simulate_writes_state_and_diagnostics() {
    let tmp = TempDir::new().unwrap();
    let o = gasnet(&[
        "simulate",
        "--network",
        path(&data("six_node/network.json")),
        "--profiles",
        path(&data("six_node/profiles.csv")),
        "--out",
        path(tmp.path()),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let diag = read_json(&tmp.path().join("diagnostics.json"));
    assert_eq!(diag["converged"], true);
    assert!(diag["conservation_error"].as_f64().unwrap() < 1e-8);
    let manifest = read_json(&tmp.path().join("manifest.json"));
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 2);
    assert!(tmp.path().join("state.csv").exists());
}

#[test]
fn missing_input_is_an_input_error() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nowhere.json");
    let o = gasnet(&[
        "simulate",
        "--network",
        path(&missing),
        "--profiles",
        path(&data("six_node/profiles.csv")),
        "--out",
        path(tmp.path()),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere.json"));
}

#[test]
fn unknown_flag_is_an_input_error() {
    assert_eq!(gasnet(&["simulate", "--bogus"]).status.code(), Some(1));
}

#[test]
fn estimate_reports_one_row_per_pipe() {
    let tmp = TempDir::new().unwrap();
    let meas = synthetic(tmp.path());
    let out = tmp.path().join("est");
    let o = estimate(&out, &meas, &["--friction-init", "1.5"]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let network = read_json(&data("six_node/network.json"));
    let pipes = network["pipes"].as_array().unwrap().len();
    let mut rdr = csv::Reader::from_path(out.join("friction_estimates.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), pipes);
    for row in &rows {
        let deviation: f64 = row[4].parse().unwrap();
        assert!(deviation.abs() < 1e-3, "{row:?}");
    }
    let diag = read_json(&out.join("diagnostics.json"));
    assert_eq!(diag["converged"], true);
}

#[test]
fn iteration_cap_exits_with_nonconvergence() {
    let tmp = TempDir::new().unwrap();
    let meas = synthetic(tmp.path());
    let out = tmp.path().join("capped");
    let o = estimate(&out, &meas, &["--friction-init", "2", "--max-iter", "1"]);
    assert_eq!(o.status.code(), Some(2));
    let diag = read_json(&out.join("diagnostics.json"));
    assert_eq!(diag["converged"], false);
    assert!(out.join("friction_estimates.csv").exists());
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let meas = synthetic(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        assert_eq!(
            estimate(dir, &meas, &["--friction-init", "1.3"])
                .status
                .code(),
            Some(0)
        );
    }
    for file in [
        "friction_estimates.csv",
        "fit_rmse.csv",
        "solution_state.csv",
        "diagnostics.json",
    ] {
        assert_eq!(
            std::fs::read(a.join(file)).unwrap(),
            std::fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn report_regenerates_tables() {
    let tmp = TempDir::new().unwrap();
    let meas = synthetic(tmp.path());
    let est = tmp.path().join("est");
    assert_eq!(estimate(&est, &meas, &[]).status.code(), Some(0));
    let out = tmp.path().join("again");
    let o = gasnet(&[
        "report",
        "--network",
        path(&data("six_node/network.json")),
        "--measurements",
        path(&meas),
        "--solution",
        path(&est),
        "--out",
        path(&out),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    for file in ["friction_estimates.csv", "fit_rmse.csv"] {
        assert_eq!(
            std::fs::read(est.join(file)).unwrap(),
            std::fs::read(out.join(file)).unwrap(),
            "{file}"
        );
    }
}
