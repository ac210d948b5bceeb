use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const DEFAULT: &str = include_str!("../src/default.toml");

fn zmpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zmpc")).args(args).output().expect("binary runs")
}

/// Default config on a coarse grid with short runs.
fn small_config(dir: &Path) -> PathBuf {
    let text = DEFAULT
        .replace("cells_per_axis = [80, 80]", "cells_per_axis = [30, 30]")
        .replace("inputs_per_axis = [61]", "inputs_per_axis = [21]")
        .replace("samples = 500", "samples = 100")
        .replace("steps = 100", "steps = 8");
    assert_ne!(text, DEFAULT);
    let path = dir.join("small.toml");
    fs::write(&path, text).unwrap();
    path
}

fn only_run_dir(out: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = fs::read_dir(out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir() && p.file_name().unwrap() != "cache")
        .collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.into_iter().next().unwrap()
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn print_default_config_is_byte_exact() {
    let out = zmpc(&["print-default-config"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), DEFAULT);
}

#[test]
fn malformed_config_exits_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    fs::write(&path, "[model\nsample_time = ").unwrap();
    let out = zmpc(&["--config", path.to_str().unwrap(), "shrink"]);
    assert_eq!(out.status.code(), Some(2));
    let unknown = tmp.path().join("unknown.toml");
    fs::write(&unknown, format!("{DEFAULT}\n[extra]\nkey = 1\n")).unwrap();
    let out = zmpc(&["--config", unknown.to_str().unwrap(), "shrink"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_risk_leaves_the_target_unchanged() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = zmpc(&["--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap(), "--gamma", "0", "shrink"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rec = read_json(&only_run_dir(tmp.path()).join("shrink.json"));
    assert_eq!(rec["s"], serde_json::json!([0.0, 0.0]));
    assert_eq!(rec["modified_target"]["lb"], serde_json::json!([0.0, 348.0]));
    assert_eq!(rec["modified_target"]["ub"], serde_json::json!([1.0, 352.0]));
    assert!(rec["xd_max_norm"].as_f64().unwrap() > 0.0);
}

#[test]
fn oversized_risk_factor_empties_the_modified_target() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = zmpc(&["--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap(), "--gamma", "10", "shrink"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn input_pinned_to_a_useless_value_has_no_invariant_set() {
    let tmp = tempfile::tempdir().unwrap();
    let text = small_config(tmp.path());
    let text = fs::read_to_string(text)
        .unwrap()
        .replace("lb = [285.0]\nub = [315.0]", "lb = [400.0]\nub = [400.0]");
    let cfg = tmp.path().join("pinned.toml");
    fs::write(&cfg, text).unwrap();
    let out = zmpc(&["--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap(), "cis"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn cis_rerun_with_warm_cache_writes_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let args = ["--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap(), "cis"];
    assert!(zmpc(&args).status.success());
    let dir = only_run_dir(tmp.path());
    let names = ["cis_actual.json", "cis_modified.json", "cis_summary.json", "config.toml"];
    let first: Vec<Vec<u8>> = names.iter().map(|n| fs::read(dir.join(n)).unwrap()).collect();
    assert!(tmp.path().join("cache").read_dir().unwrap().count() >= 2);
    assert!(zmpc(&args).status.success());
    let second: Vec<Vec<u8>> = names.iter().map(|n| fs::read(dir.join(n)).unwrap()).collect();
    assert_eq!(first, second);
    let summary = read_json(&dir.join("cis_summary.json"));
    assert!(summary["actual"]["member_fraction"].as_f64().unwrap() > 0.0);
}

#[test]
fn run_writes_trajectory_and_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(small_config(tmp.path()))
        .unwrap()
        .replace("x0 = [0.12, 355.0]", "x0 = [0.3, 353.0]");
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, text).unwrap();
    let out = zmpc(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
        "--seed",
        "2",
        "--variant",
        "proposed",
        "run",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = only_run_dir(tmp.path());
    let csv = fs::read_to_string(dir.join("trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,time_min,C_A,T,T_c,w_CAf,w_Tf,zone_cost_actual,zone_cost_modified,econ_cost,V_N0,solver_status"
    );
    assert_eq!(lines.count(), 8);
    let metrics = read_json(&dir.join("metrics.json"));
    assert!(metrics.get("violations_after_entry").is_some());
    let saved = fs::read_to_string(dir.join("config.toml")).unwrap();
    assert!(saved.contains("seed = 2"));
}

#[test]
fn far_initial_state_aborts_with_run_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = zmpc(&["--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap(), "run"]);
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("step"));
}

#[test]
fn zero_risk_sweep_matches_nominal_run() {
    let tmp = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(small_config(tmp.path()))
        .unwrap()
        .replace("x0 = [0.12, 355.0]", "x0 = [0.5, 350.0]");
    let cfg = tmp.path().join("sweep.toml");
    fs::write(&cfg, text).unwrap();
    let sweep_out = tmp.path().join("sweep");
    let run_out = tmp.path().join("run");
    let base = ["--config", cfg.to_str().unwrap(), "--seed", "3"];
    let out = zmpc(&[&base[..], &["--out", sweep_out.to_str().unwrap(), "sweep", "--gammas", "0"]].concat());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = zmpc(&[&base[..], &["--out", run_out.to_str().unwrap(), "--variant", "nominal", "run"]].concat());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let metrics = read_json(&only_run_dir(&run_out).join("metrics.json"));
    let mut reader = csv::Reader::from_path(only_run_dir(&sweep_out).join("sweep.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 1);
    let col = |name: &str| -> f64 {
        let i = headers.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
        rows[0][i].parse().unwrap()
    };
    assert_eq!(col("gamma"), 0.0);
    assert_eq!(col("mean_violations_after_entry"), metrics["violations_after_entry"].as_f64().unwrap());
    assert_eq!(
        col("mean_accumulated_zone_cost_actual"),
        metrics["accumulated_zone_cost_actual"].as_f64().unwrap()
    );
    assert_eq!(
        col("mean_accumulated_economic_cost"),
        metrics["accumulated_economic_cost"].as_f64().unwrap()
    );
}
