use std::fs;
use std::process::Command;

fn bgest() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bgest"))
}

#[test]
fn simulate_then_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let x = dir.path().join("x.csv");
    let status = bgest()
        .args(["simulate", "--alpha", "1.3", "--beta", "-0.3333", "--sigma", "1", "--n", "23400", "--h", "4.2735e-5", "--seed", "7", "--out"])
        .arg(&x)
        .status()
        .unwrap();
    assert!(status.success());
    let text = fs::read_to_string(&x).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("index,increment"));
    assert_eq!(lines.count(), 23400);

    let est = dir.path().join("est.json");
    let out = bgest()
        .args(["estimate", "--in"])
        .arg(&x)
        .args(["--u", "practical", "--out"])
        .arg(&est)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&est).unwrap()).unwrap();
    assert!(v.get("theta_hat").is_some());
    assert!(v.get("ci").is_some());
    assert!(v.get("status").is_some() && v.get("history").is_some());
}

#[test]
fn fisher_trajectory_file() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("f.csv");
    let out = bgest()
        .args(["fisher", "--alpha", "1.3", "--r", "1", "--sigma2", "1", "--h-min", "1e-6", "--out"])
        .arg(&f)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&f).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[0].starts_with("h,i_rr"));
    assert!(rows[4].starts_with("1e-6"));
}

#[test]
fn mc_writes_records_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = bgest()
        .args(["mc", "--alpha", "1.3", "--beta", "-0.3333", "--h", "0.001", "--replications", "4", "--estimators", "aj,trv", "--out-dir"])
        .arg(dir.path())
        .env("BGEST_WORKERS", "2")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let records = fs::read_to_string(dir.path().join("records.csv")).unwrap();
    assert_eq!(records.lines().count(), 5);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["replications"], 4);
}

#[test]
fn bad_arguments_exit_with_two() {
    let out = bgest().args(["simulate", "--n", "ten"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
    let out = bgest().arg("nonsense").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = bgest()
        .args(["estimate", "--in"])
        .arg(dir.path().join("missing.csv"))
        .args(["--out"])
        .arg(dir.path().join("e.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}
