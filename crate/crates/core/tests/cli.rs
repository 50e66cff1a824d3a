use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BASE: &str = r#"
[model]
m0 = 0.0
m1 = 0.5
sigma = 1.0

[harvest]
family = "exponential"
mean = MEANS
sense_cost = 0.5
warmup = 200

[detector]
h = 6.0

[experiment]
n_runs = 2000
seed = 5

[constants]
ladder_reps = 20000
zeta_reps = 2000
horizon = 100
delta_reps = 2000
neg_reps = 20000
"#;

fn config(dir: &Path, name: &str, means: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, BASE.replace("MEANS", means)).unwrap();
    path.to_str().unwrap().to_string()
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_harvest-cusum"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn stationary_reports_flow_balance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "run.toml", "0.4");
    let o = run(dir.path(), &["--config", &cfg, "stationary"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let chain = read(dir.path(), "chain.csv");
    let row: Vec<f64> = chain.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!((row[4] - 0.8).abs() < 0.01, "{chain}");
    assert!(read(dir.path(), "density_H0.4.csv").starts_with("b,f_B\n"));
    assert!(dir.path().join("manifest_stationary.toml").exists());
}

#[test]
fn stationary_rejects_surplus() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "run.toml", "0.6");
    let o = run(dir.path(), &["--config", &cfg, "stationary"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("surplus regime: stationary density undefined"));
}

#[test]
fn missing_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(&path, BASE.replace("MEANS", "0.4").replace("sigma = 1.0\n", "")).unwrap();
    let o = run(dir.path(), &["--config", path.to_str().unwrap(), "predict"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("model.sigma"));
}

#[test]
fn predict_routes_by_regime_and_handles_empty_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "run.toml", "[0.4, 0.5]");
    let o = run(dir.path(), &["--config", &cfg, "predict"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = read(dir.path(), "predictions.csv");
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("deficit,0.4,"));
    assert!(rows[1].starts_with("surplus,0.5,"));

    let empty = tempfile::tempdir().unwrap();
    let cfg = config(empty.path(), "run.toml", "[]");
    let o = run(empty.path(), &["--config", &cfg, "predict"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read(empty.path(), "predictions.csv").lines().count(), 1);
}

#[test]
fn predict_reuses_cached_constants() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "run.toml", "0.4");
    assert!(run(dir.path(), &["--config", &cfg, "constants"]).status.success());
    // A hand-edited cache is picked up as long as the manifest matches.
    let edited: String = read(dir.path(), "constants.csv")
        .lines()
        .map(|l| if l.starts_with("surplus,delta_bar,") { "surplus,delta_bar,0.5,0" } else { l })
        .collect::<Vec<_>>()
        .join("\n");
    fs::write(dir.path().join("constants.csv"), edited + "\n").unwrap();
    assert!(run(dir.path(), &["--config", &cfg, "predict"]).status.success());
    let rows = read(dir.path(), "predictions.csv");
    let pi1_beta_bar: f64 = rows.lines().nth(1).unwrap().rsplit(',').next().unwrap().parse().unwrap();
    let pi1: f64 = rows.lines().nth(1).unwrap().split(',').nth(4).unwrap().parse().unwrap();
    assert!((pi1_beta_bar - pi1 * 0.125 * 0.25).abs() < 1e-12, "{rows}");

    // A different seed invalidates the cache.
    assert!(run(dir.path(), &["--config", &cfg, "--seed", "6", "predict"]).status.success());
    assert!(!read(dir.path(), "constants.csv").contains("surplus,delta_bar,0.5,0\n"));
}

#[test]
fn simulate_is_reproducible_across_runs_and_workers() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = config(a.path(), "run.toml", "[0.3, 0.6]");
    assert!(run(a.path(), &["--config", &cfg, "--workers", "1", "simulate", "delay"]).status.success());
    assert!(run(b.path(), &["--config", &cfg, "--workers", "3", "simulate", "delay"]).status.success());
    for name in ["summary_delay_H0.3_h6.csv", "runs_delay_H0.6_h6.csv", "simulations.csv"] {
        assert_eq!(read(a.path(), name), read(b.path(), name), "{name}");
    }
    let summary = read(a.path(), "summary_delay_H0.3_h6.csv");
    assert!(summary.contains("gate_mode,full-battery\n"));
    assert!(summary.contains("master_seed,5\n"));
}

#[test]
fn manifest_reproduces_the_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = config(a.path(), "run.toml", "0.4");
    assert!(run(a.path(), &["--config", &cfg, "--seed", "9", "simulate", "delay"]).status.success());
    let manifest = a.path().join("manifest_simulate-delay.toml");
    let o = run(b.path(), &["--config", manifest.to_str().unwrap(), "simulate", "delay"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read(a.path(), "simulations.csv"), read(b.path(), "simulations.csv"));
    assert!(read(b.path(), "summary_delay_H0.4_h6.csv").contains("master_seed,9\n"));
}

#[test]
fn false_alarm_writes_survival_curve() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(&path, BASE.replace("MEANS", "0.4").replace("h = 6.0", "h = 3.0")).unwrap();
    let o = run(dir.path(), &["--config", path.to_str().unwrap(), "simulate", "fa"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let curve = read(dir.path(), "survival_fa_H0.4_h3.csv");
    assert!(curve.starts_with("x,log_survival\n"));
    assert!(curve.lines().count() > 100);
    let table = read(dir.path(), "simulations.csv");
    let row: Vec<&str> = table.lines().nth(1).unwrap().split(',').collect();
    let exponent: f64 = row[9].parse().unwrap();
    assert!(exponent > 0.0 && exponent < 0.2, "{table}");
}

#[test]
fn report_joins_predictions_and_simulations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "run.toml", "[0.4, 0.6]");
    assert!(run(dir.path(), &["--config", &cfg, "predict"]).status.success());
    assert!(run(dir.path(), &["--config", &cfg, "simulate", "delay"]).status.success());
    let predict = dir.path().join("manifest_predict.toml");
    let simulate = dir.path().join("manifest_simulate-delay.toml");

    let o = run(dir.path(), &["report", predict.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    let o = run(dir.path(), &["report", predict.to_str().unwrap(), simulate.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = read(dir.path(), "report.csv");
    let rows: Vec<Vec<&str>> = report.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][2], "deficit");
    assert!(!rows[0][9].is_empty(), "deficit rows carry the pi1·beta_bar proxy");
    for row in &rows {
        let rel: f64 = row[7].parse().unwrap();
        assert!(rel.abs() < 0.1, "{report}");
    }

    let other = tempfile::tempdir().unwrap();
    let path = other.path().join("run.toml");
    fs::write(&path, BASE.replace("MEANS", "[0.4, 0.6]").replace("m1 = 0.5", "m1 = 0.7")).unwrap();
    assert!(run(other.path(), &["--config", path.to_str().unwrap(), "simulate", "delay"]).status.success());
    let mismatched = other.path().join("manifest_simulate-delay.toml");
    let o = run(dir.path(), &["report", predict.to_str().unwrap(), mismatched.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("model.m1"), "{}", stderr(&o));
}

#[test]
fn unknown_gate_mode_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(&path, BASE.replace("MEANS", "0.4").replace("h = 6.0", "h = 6.0\ngate_mode = \"solar\"")).unwrap();
    let o = run(dir.path(), &["--config", path.to_str().unwrap(), "simulate", "delay"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown gate mode `solar`"));
}
