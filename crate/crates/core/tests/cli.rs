use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ivmsm::panel::read_panel_csv;

fn ivmsm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ivmsm")).args(args).env_remove("IVMSM_JOBS").output().expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn simulate(dir: &Path, name: &str, extra: &[&str]) -> std::path::PathBuf {
    let out = dir.join(name);
    let mut args = vec!["simulate", "--n", "400", "--seed", "7", "--out", path_str(&out)];
    args.extend_from_slice(extra);
    let o = ivmsm(&args);
    assert!(o.status.success(), "simulate failed: {}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn simulate_is_deterministic_and_writes_truth() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulate(dir.path(), "a.csv", &[]);
    let b = simulate(dir.path(), "b.csv", &[]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let truth = fs::read_to_string(dir.path().join("a.csv.truth")).unwrap();
    assert!(truth.contains("dgp = linear"));
    assert!(truth.contains("seed = 7"));
    let panel = read_panel_csv(fs::File::open(&a).unwrap()).unwrap();
    assert_eq!((panel.n, panel.periods), (400, 2));
}

#[test]
fn estimate_reads_the_sidecar_and_reports_csv() {
    let dir = tempfile::tempdir().unwrap();
    let panel = simulate(dir.path(), "p.csv", &[]);
    let report = dir.path().join("r.csv");
    let o = ivmsm(&["estimate", "--panel", path_str(&panel), "--kind", "iv", "--out", path_str(&report)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(&report).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "kind,beta0,beta1,se0,se1,bs_se0,bs_se1,n,T,seed");
    let row = lines.next().unwrap();
    assert!(row.starts_with("iv,"));
    assert!(row.ends_with(",400,2,7"));
}

#[test]
fn wald_on_multi_period_panel_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let panel = simulate(dir.path(), "p.csv", &[]);
    let o = ivmsm(&["estimate", "--panel", path_str(&panel), "--kind", "wald"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("T=1"));
}

#[test]
fn irrelevant_instrument_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.csv");
    let o = ivmsm(&["simulate", "--dgp", "markov", "--delta0", "0", "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("irrelevant"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "bogus = 1\n").unwrap();
    let out = dir.path().join("x.csv");
    let o = ivmsm(&["simulate", "--config", path_str(&cfg), "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
}

#[test]
fn config_values_feed_the_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    fs::write(&cfg, "# small run\nn_grid = 300\nreplications = 3\nkinds = iv, associational\nseed = 3\n").unwrap();
    let out = dir.path().join("cov.csv");
    let o = ivmsm(&["experiment", "--config", path_str(&cfg), "--no-sandwich", "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().skip(1).all(|l| l.contains(",300,")));
}

#[test]
fn zero_replications_is_a_usage_error() {
    let o = ivmsm(&["experiment", "--replications", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("at least 1"));
}

#[test]
fn analyze_weights_writes_growth_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g.csv");
    let o = ivmsm(&[
        "analyze-weights", "--model", "sra_unstab", "--t", "1,2,3", "--mc-n", "2000", "--seed", "4", "--out", path_str(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(&out).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("model,"));
    assert!(header.ends_with("mc_mean,mc_se,z,seed"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn unknown_growth_model_lists_choices() {
    let o = ivmsm(&["analyze-weights", "--model", "bogus"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("sra_unstab") && err.contains("iv_stab"));
}

#[test]
fn failing_ict_table_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("t.csv");
    fs::write(&table, "t,cell,u,z,p0,p1\n1,0,0,0,0.6,0.4\n1,0,0,1,0.3,0.7\n1,0,1,0,0.5,0.5\n1,0,1,1,0.1,0.9\n").unwrap();
    let o = ivmsm(&["diagnose", "--model", path_str(&table)]);
    assert_eq!(o.status.code(), Some(2));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("fail"));
}

#[test]
fn passing_ict_table_exits_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("t.csv");
    fs::write(&table, "t,cell,u,z,p0,p1\n1,0,0,0,0.6,0.4\n1,0,0,1,0.3,0.7\n1,0,1,0,0.8,0.2\n1,0,1,1,0.5,0.5\n").unwrap();
    let o = ivmsm(&["diagnose", "--model", path_str(&table)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn weighting_identity_diagnostic_passes_on_the_markov_process() {
    let o = ivmsm(&["diagnose", "--theorem1", "--dgp", "markov", "--n", "20000", "--seed", "2"]);
    assert!(o.status.success(), "{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(out.lines().filter(|l| l.starts_with("theorem1,markov,")).count(), 5);
}

#[test]
fn help_and_version_succeed() {
    assert!(ivmsm(&["--help"]).status.success());
    assert!(ivmsm(&["--version"]).status.success());
    assert_eq!(ivmsm(&["no-such-command"]).status.code(), Some(1));
}
