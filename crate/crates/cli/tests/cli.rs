use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn smc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smc-search"))
        .args(args)
        .output()
        .unwrap()
}

fn error_json(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr
        .lines()
        .rev()
        .find(|l| l.starts_with('{'))
        .expect("json error on stderr");
    serde_json::from_str(line).unwrap()
}

fn write_config(dir: &Path, sampler: Value) -> String {
    let cfg = serde_json::json!({
        "sampler": sampler,
        "task": {"language": "bits", "evaluator": {"kind": "bitstring", "n_bits": 5}},
        "backend": {"kind": "bit_flip", "uniform_prior": true},
        "output_dir": "out"
    });
    let p = dir.join("cfg.json");
    std::fs::write(&p, cfg.to_string()).unwrap();
    p.to_string_lossy().into_owned()
}

fn small_run(dir: &Path) -> String {
    let cfg = write_config(
        dir,
        serde_json::json!({"n_islands": 2, "particles_per_island": 8, "beta": 4.0, "kappa": 0.5, "seed": 1}),
    );
    let out = smc(&["run", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir.join("out").to_string_lossy().into_owned()
}

#[test]
fn invalid_kappa_fails_before_any_work() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), serde_json::json!({"kappa": 1.0}));
    let out = smc(&["run", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "config");
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn dry_run_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), serde_json::json!({}));
    let out = smc(&["run", "--config", &cfg, "--dry-run"]);
    assert!(out.status.success());
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn mock_run_terminates_on_every_island() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = small_run(tmp.path());
    let summary: Value = serde_json::from_slice(&std::fs::read(Path::new(&dir).join("summary.json")).unwrap()).unwrap();
    for isl in summary["islands"].as_array().unwrap() {
        assert_eq!(isl["terminated"], true);
        assert_eq!(isl["lambdas"].as_array().unwrap().last().unwrap().as_f64(), Some(1.0));
    }
    assert!(summary["best"]["program"].is_object());
    let diag: Value =
        serde_json::from_slice(&std::fs::read(Path::new(&dir).join("diagnostics.json")).unwrap()).unwrap();
    assert!(diag["oracle"]["path_gamma"].as_f64().unwrap() <= diag["oracle"]["path_gamma_bound"].as_f64().unwrap());
    assert!(diag["min_ess_fraction"].as_f64().unwrap() >= 0.5);
    // a second run into the same directory is refused
    let again = smc(&["run", "--config", &tmp.path().join("cfg.json").to_string_lossy()]);
    assert_eq!(again.status.code(), Some(2));
    assert_eq!(error_json(&again)["error"], "run_exists");
}

#[test]
fn schedule_export_has_one_row_per_iteration() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = small_run(tmp.path());
    assert!(smc(&["export", &dir, "--what", "schedule"]).status.success());
    let text = std::fs::read_to_string(Path::new(&dir).join("export/schedule.csv")).unwrap();
    let mut rows = text.lines();
    assert_eq!(
        rows.next().unwrap(),
        "island,epoch,iteration,lambda_prev,lambda,delta_beta,beta_t,ess,ess_fraction,forced"
    );
    let events = std::fs::read_to_string(Path::new(&dir).join("events.jsonl")).unwrap();
    let starts = events
        .lines()
        .filter(|l| l.contains("\"kind\":\"iteration_start\""))
        .count();
    assert_eq!(rows.count(), starts);
}

#[test]
fn truncated_log_reports_last_good_seq() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = small_run(tmp.path());
    let log = Path::new(&dir).join("events.jsonl");
    let text = std::fs::read_to_string(&log).unwrap();
    let keep: Vec<&str> = text.lines().take(5).collect();
    std::fs::write(&log, format!("{}\n{}", keep.join("\n"), "{\"v\":1,\"seq\":5,\"ki")).unwrap();
    let out = smc(&["export", &dir, "--what", "kernels"]);
    assert_eq!(out.status.code(), Some(1));
    let err = error_json(&out);
    assert_eq!(err["error"], "corrupt_log");
    assert_eq!(err["last_good_seq"], 4);
}

#[test]
fn missing_and_empty_run_dirs() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope").to_string_lossy().into_owned();
    let out = smc(&["export", &missing, "--what", "flow"]);
    assert_eq!(error_json(&out)["error"], "missing_run");
    let out = smc(&["resume", &tmp.path().to_string_lossy()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"], "no_checkpoint");
}

#[test]
fn unknown_suite_is_a_usage_error() {
    let out = smc(&["oracle-check", "nonsense"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "usage");
}

#[test]
fn invariance_suite_passes() {
    let out = smc(&["oracle-check", "invariance"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 4);
}
