use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const LIN: &str = r#"
algorithm = "replinucb"
horizon = 200
rho = 0.3
delta = 0.05
trials = 5
master_seed = 1

[instance]
theta = [0.6, -0.3]
sigma = 0.1
s_bound = 1.0
actions = { kind = "circle", m = 8 }
"#;

fn repbandit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_repbandit"))
        .args(args)
        .output()
        .unwrap()
}

fn run_config(sub: &str, text: &str, dir: &Path) -> Output {
    let cfg = dir.join("config.toml");
    fs::write(&cfg, text).unwrap();
    let out = dir.join("out");
    repbandit(&[
        sub,
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn zero_trials_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_config("linbandit", &LIN.replace("trials = 5", "trials = 0"), dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("trials"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn rho_at_most_three_delta_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_config("linbandit", &LIN.replace("rho = 0.3", "rho = 0.1"), dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("3 delta"));
}

#[test]
fn linear_outputs_respect_batch_budget() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_config("linbandit", LIN, dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/summary.json")).unwrap())
            .unwrap();
    let max_batches = summary["batch_plan"]["max_batches"].as_u64().unwrap();
    let batches = fs::read_to_string(dir.path().join("out/batches.csv")).unwrap();
    let mut lines = batches.lines();
    assert_eq!(lines.next(), Some("trial_id,batch_count,trigger_rounds"));
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        let count: u64 = fields[1].parse().unwrap();
        assert!(count <= max_batches);
        let triggers = fields[2].split(';').filter(|s| !s.is_empty()).count() as u64;
        assert_eq!(triggers + 1, count);
    }
    let regret = fs::read_to_string(dir.path().join("out/regret.csv")).unwrap();
    assert!(regret.starts_with("round,mean_regret,p10,p90\n1,"));
}

#[test]
fn subcommand_must_fit_algorithm() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_config("mab", LIN, dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_file_is_a_config_error() {
    let out = repbandit(&["mab", "--config", "/nonexistent/config.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_suite_is_a_usage_error() {
    let out = repbandit(&["check", "repfoo"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("repmean"));
}

#[test]
fn check_repridge_passes() {
    let out = repbandit(&["check", "repridge", "--seed", "3"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}");
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 2);
}
