use std::path::Path;
use std::process::Command;

use lanekeep_core::harness::{read_csv, CSV_COLUMNS};

fn lanekeep() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lanekeep"))
}

fn scenario(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

#[test]
fn shipped_scenarios_parse() {
    for name in ["lane_keeping.toml", "offset_change.toml", "curvy_road.toml"] {
        lanekeep_core::harness::Scenario::load(&scenario(name)).unwrap();
    }
}

#[test]
fn simulate_writes_trace_summary_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let status = lanekeep()
        .args(["simulate", "--scenario"])
        .arg(scenario("lane_keeping.toml"))
        .arg("--out")
        .arg(dir.path())
        .args(["--seed", "3", "--plots"])
        .status()
        .unwrap();
    assert!(status.success());
    let rows = read_csv(&dir.path().join("trace.csv")).unwrap();
    assert_eq!(rows.len(), 201);
    let header = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert_eq!(header.lines().next().unwrap(), CSV_COLUMNS.join(","));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["controller"], "adaptive");
    assert_eq!(summary["violation_steps"], 0);
    let theta = std::fs::read_to_string(dir.path().join("theta.jsonl")).unwrap();
    assert_eq!(theta.lines().count(), 201);
    for f in ["states.svg", "input.svg", "theta.svg"] {
        assert!(std::fs::read_to_string(dir.path().join(f)).unwrap().starts_with("<svg"));
    }
}

#[test]
fn multiple_runs_get_prefixed_files() {
    let dir = tempfile::tempdir().unwrap();
    let status = lanekeep()
        .args(["simulate", "--scenario"])
        .arg(scenario("lane_keeping.toml"))
        .arg("--out")
        .arg(dir.path())
        .args(["--controller", "lqr", "--runs", "2"])
        .status()
        .unwrap();
    assert!(status.success());
    let a = read_csv(&dir.path().join("run0_trace.csv")).unwrap();
    let b = read_csv(&dir.path().join("run1_trace.csv")).unwrap();
    assert!(a
        .iter()
        .all(|r| r.status == lanekeep_core::harness::TraceStatus::Unconstrained));
    assert_ne!(a, b, "different seeds should draw different disturbances");
    assert!(!dir.path().join("trace.csv").exists());
}

#[test]
fn bad_arguments_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bad_controller = lanekeep()
        .args(["simulate", "--scenario"])
        .arg(scenario("lane_keeping.toml"))
        .arg("--out")
        .arg(dir.path())
        .args(["--controller", "pid"])
        .output()
        .unwrap();
    assert!(!bad_controller.status.success());
    let missing = lanekeep()
        .args(["simulate", "--scenario", "does/not/exist.toml", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn verify_runs_a_single_check_and_rejects_unknown_suites() {
    let ok = lanekeep().args(["verify", "--suite", "lqr"]).output().unwrap();
    assert!(ok.status.success());
    let text = String::from_utf8(ok.stdout).unwrap();
    assert!(text.starts_with("[PASS]"), "{text}");
    let unknown = lanekeep().args(["verify", "--suite", "nope"]).output().unwrap();
    assert!(!unknown.status.success());
    assert!(String::from_utf8(unknown.stderr).unwrap().contains("estimator"));
}
