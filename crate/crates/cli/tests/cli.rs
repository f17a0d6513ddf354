use std::path::Path;
use std::process::{Command, Output};

fn advlab(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advlab"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("ADVLAB_THREADS")
        .output()
        .unwrap()
}

#[test]
fn missing_config_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = advlab(dir.path(), &["--config", "/nonexistent/advlab.conf", "train"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = advlab(dir.path(), &["--set", "nonsense=1", "train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonsense"));
}

#[test]
fn zero_steps_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let out = advlab(dir.path(), &["--set", "steps=0", "train"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.trim_end(), advlab_core::trainer::METRICS_HEADER);
    assert!(dir.path().join("policy.ckpt").exists());
}

#[test]
fn resolved_snapshot_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let out = advlab(&first, &["--set", "steps=15", "--set", "estimator=rloo", "--seed", "9", "train"]);
    assert!(out.status.success());
    let snapshot = first.join("config.resolved");
    let second = dir.path().join("second");
    let out = advlab(&second, &["--config", snapshot.to_str().unwrap(), "train"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        std::fs::read(first.join("metrics.csv")).unwrap(),
        std::fs::read(second.join("metrics.csv")).unwrap()
    );
}

#[test]
fn compare_needs_two_estimators() {
    let dir = tempfile::tempdir().unwrap();
    let out = advlab(dir.path(), &["compare", "--estimators", "grpo", "--seeds", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn compare_writes_tables_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let out = advlab(
        dir.path(),
        &["--set", "steps=5", "compare", "--estimators", "grpo,rloo", "--seeds", "0,1"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let root = dir.path().join("compare");
    let summary = std::fs::read_to_string(root.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 5);
    let long = std::fs::read_to_string(root.join("long.csv")).unwrap();
    assert_eq!(long.lines().count(), 1 + 2 * 2 * 5);
    for f in ["grpo/1/metrics.csv", "plots/reward_rloo_0.dat", "plots/kl_grpo_mean.dat"] {
        assert!(root.join(f).exists(), "{f}");
    }
}

#[test]
fn underpowered_verify_exits_with_verification_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = advlab(dir.path(), &["--set", "trials=100", "--set", "instances=2", "verify", "all"]);
    assert_eq!(out.status.code(), Some(4));
    let csv = std::fs::read_to_string(dir.path().join("verify-all.csv")).unwrap();
    assert!(csv.starts_with(advlab_core::oracle::PROBE_CSV_HEADER));
    assert!(csv.contains("inconclusive"));
}

#[test]
fn gradient_verification_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = advlab(dir.path(), &["--set", "instances=10", "verify", "gradients"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
}
