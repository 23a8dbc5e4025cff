use std::process::Command;

fn lqac() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lqac"))
}

#[test]
fn dare_prints_stable_gain() {
    let out = lqac()
        .args(["dare", "--system", "stable"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let k = &v["k"][0];
    assert!((k[0].as_f64().unwrap() + 0.10).abs() < 0.01);
    assert!((k[1].as_f64().unwrap() + 0.48).abs() < 0.01);
    assert!(v["closed_loop_spectral_radius"].as_f64().unwrap() < 1.0);
}

#[test]
fn run_writes_outputs_and_region_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    let out = lqac()
        .args([
            "run",
            "--preset",
            "stable-paper",
            "--runs",
            "4",
            "--horizon",
            "200",
            "--seed",
            "3",
        ])
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = dir.path().join("runs.csv");
    assert!(csv.exists() && dir.path().join("summary.json").exists());

    let out = lqac()
        .args([
            "region",
            "--level",
            "0.9",
            "--kind",
            "ab",
            "--kind",
            "pred_full",
            "--csv",
        ])
        .arg(&csv)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("variant,t,region,threshold,coverage,std_error,n")
    );
    assert!(lines.any(|l| l.starts_with("stepwise,200,ab,")));
}

#[test]
fn config_errors_exit_one() {
    let out = lqac()
        .args(["run", "--preset", "nonexistent"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = lqac()
        .args(["run", "--runs", "1", "--horizon", "50", "--tau", "-1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_plan_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("plan.json");
    std::fs::write(&path, r#"{"n_runs": 1, "surprise": true}"#).unwrap();
    let out = lqac().arg("run").arg("--plan").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unstabilizable_params_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sys.json");
    std::fs::write(
        &path,
        r#"{"a": [[1.5, 0.0], [0.0, 0.5]], "b": [[0.0], [1.0]], "q": [[1.0, 0.0], [0.0, 1.0]], "r": [[1.0]], "sigma": 1.0}"#,
    )
    .unwrap();
    let out = lqac()
        .arg("dare")
        .arg("--params")
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn failing_check_exits_two() {
    // Far too short for the asymptotic checks to hold.
    let out = lqac()
        .args([
            "run",
            "--runs",
            "2",
            "--horizon",
            "60",
            "--check",
            "--variant",
            "stepwise",
        ])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
}

#[test]
fn usage_errors_exit_one() {
    let out = lqac().args(["run", "--runs", "many"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(lqac().arg("--help").output().unwrap().status.success());
}
