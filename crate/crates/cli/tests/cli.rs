use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use specalloc_cli::records::{SWEEP_SCHEMA, TRAJECTORY_SCHEMA};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_specalloc"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn specalloc")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// Data rows (after the schema and header lines) split on commas.
fn csv_rows(p: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(p).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("#schema="));
    lines.next().unwrap();
    lines.map(|l| l.split(',').map(str::to_string).collect()).collect()
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn single_bts_gets_the_whole_band() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a");
    let o = run(&["allocate", "--config", path_str(&config("single.json")), "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let alloc = read_json(&out.join("allocation.json"));
    assert_eq!(alloc["schema"], "specalloc.allocation/1");
    assert_eq!(alloc["allocation"]["fractions"], serde_json::json!({"1": 1.0}));
    let rep = read_json(&out.join("report.json"));
    assert_eq!(rep["support"], serde_json::json!(["{1}"]));
}

#[test]
fn seven_bts_conservative_support_is_small() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a");
    let o = run(&["allocate", "--config", path_str(&config("hex7.json")), "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(0));
    let rep = read_json(&out.join("report.json"));
    assert!(rep["support"].as_array().unwrap().len() <= 7);
    assert!(rep["evaluation"]["bounds"].is_object());
}

#[test]
fn infeasible_load_exits_with_margin() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("hex7.json")).unwrap().replace("24.0", "60.0");
    let cfg = write_config(dir.path(), "hot.json", &text);
    for scheme in ["conservative", "refined", "orthogonal", "full-reuse"] {
        let o = run(&["allocate", "--config", path_str(&cfg), "--scheme", scheme, "--out", path_str(&dir.path().join("x"))]);
        assert_eq!(o.status.code(), Some(2), "{scheme}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("throughput margin"), "{scheme}");
    }
}

#[test]
fn usage_and_config_errors_exit_one() {
    assert_eq!(run(&["allocate", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&[]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.json", r#"{"layout": {"kind": "explicit", "bts": []}, "traffic": {"kind": "nope"}}"#);
    let o = run(&["allocate", "--config", path_str(&bad), "--out", path_str(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("traffic"));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn allocation_files_round_trip_to_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("hex7.json");
    for scheme in ["conservative", "orthogonal"] {
        let a = dir.path().join(format!("{scheme}-a"));
        let b = dir.path().join(format!("{scheme}-b"));
        assert_eq!(run(&["allocate", "--config", path_str(&cfg), "--scheme", scheme, "--out", path_str(&a)]).status.code(), Some(0));
        let o = run(&[
            "allocate",
            "--config",
            path_str(&cfg),
            "--allocation",
            path_str(&a.join("allocation.json")),
            "--out",
            path_str(&b),
        ]);
        assert_eq!(o.status.code(), Some(0));
        let (ra, rb) = (read_json(&a.join("report.json")), read_json(&b.join("report.json")));
        assert_eq!(ra["evaluation"], rb["evaluation"]);
        assert_eq!(ra["scheme"], rb["scheme"]);
        assert_eq!(std::fs::read(a.join("allocation.json")).unwrap(), std::fs::read(b.join("allocation.json")).unwrap());
    }
}

#[test]
fn allocation_with_wrong_schema_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let f = write_config(dir.path(), "x.json", r#"{"schema": "other/1", "scheme": "conservative", "allocation": {"n": 1, "fractions": {"1": 1.0}}}"#);
    let o = run(&["allocate", "--config", path_str(&config("single.json")), "--allocation", path_str(&f), "--out", path_str(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn single_point_sweep_has_one_row_and_sidecars() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let o = run(&[
        "sweep",
        "--config",
        path_str(&config("hex7.json")),
        "--loads",
        "10",
        "--scheme",
        "conservative",
        "--horizon",
        "50000",
        "--out",
        path_str(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), format!("#schema={SWEEP_SCHEMA}"));
    let rows = csv_rows(&out.join("sweep.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][2], "conservative");
    assert_eq!(rows[0][3], "ok");
    assert_eq!(csv_rows(&out.join("cells.csv")).len(), 7);
    let cdf = csv_rows(&out.join("cdf").join("point000_conservative.csv"));
    let last: f64 = cdf.last().unwrap()[3].parse().unwrap();
    assert!((last - 1.0).abs() < 1e-9);
}

#[test]
fn sweep_across_the_orthogonal_boundary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let o = run(&[
        "sweep",
        "--config",
        path_str(&config("hex7.json")),
        "--loads",
        "10,36",
        "--scheme",
        "conservative,orthogonal",
        "--horizon",
        "0",
        "--out",
        path_str(&out),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let rows = csv_rows(&out.join("sweep.csv"));
    let status: Vec<(&str, &str, &str)> = rows.iter().map(|r| (r[0].as_str(), r[2].as_str(), r[3].as_str())).collect();
    assert_eq!(
        status,
        vec![("10", "conservative", "ok"), ("10", "orthogonal", "ok"), ("36", "conservative", "ok"), ("36", "orthogonal", "infeasible")]
    );
    let region: f64 = rows[2][1].parse().unwrap();
    assert!(region < 1.0);
}

#[test]
fn sweep_output_is_byte_identical_across_runs_and_pool_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for workers in ["1", "3"] {
        let out = dir.path().join(format!("w{workers}"));
        let o = bin()
            .args([
                "sweep",
                "--config",
                path_str(&config("hex7.json")),
                "--loads",
                "8,16",
                "--scheme",
                "full-reuse,orthogonal,conservative",
                "--seeds",
                "3,4",
                "--horizon",
                "20000",
                "--out",
                path_str(&out),
            ])
            .env("SPECALLOC_WORKERS", workers)
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(0));
        outputs.push(out);
    }
    for f in ["sweep.csv", "cells.csv", "cdf/point005_conservative.csv"] {
        assert_eq!(std::fs::read(outputs[0].join(f)).unwrap(), std::fs::read(outputs[1].join(f)).unwrap(), "{f}");
    }
}

#[test]
fn bad_worker_count_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["sweep", "--config", path_str(&config("single.json")), "--loads", "1", "--out", path_str(dir.path())])
        .env("SPECALLOC_WORKERS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn powerctl_single_bts_is_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p");
    let o = run(&["powerctl", "--config", path_str(&config("single.json")), "--horizon", "10000", "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), format!("#schema={TRAJECTORY_SCHEMA}"));
    let rows = csv_rows(&out.join("trajectory.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][6], "true");
}

#[test]
fn powerctl_seven_bts_settles() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p");
    let o = run(&["powerctl", "--config", path_str(&config("hex7.json")), "--horizon", "0", "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(0));
    let rows = csv_rows(&out.join("trajectory.csv"));
    assert!(rows.len() >= 2 && rows.len() <= 20);
    let delay: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(delay[1] < delay[0]);
    let last = rows.last().unwrap();
    assert!(last[6] == "true" || !last[7].is_empty());
    let traj = read_json(&out.join("trajectory.json"));
    assert_eq!(traj["steps"].as_array().unwrap().len(), rows.len());
}

#[test]
fn powerctl_rejects_baseline_schemes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["powerctl", "--config", path_str(&config("single.json")), "--scheme", "full-reuse", "--out", path_str(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
}
