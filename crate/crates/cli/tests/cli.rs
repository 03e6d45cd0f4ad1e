use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fedar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedar"))
        .arg("--quiet")
        .args(args)
        .output()
        .expect("binary runs")
}

const CONFIG: &str = r#"{
  "strategy": "fedar",
  "num_clients": 4,
  "rounds": 7,
  "batch_size": 8,
  "p_min": 0.3,
  "eval_every": 3,
  "seed": 11,
  "dataset": {"kind": "synthetic", "num_classes": 4, "per_class": 25, "input_dim": 3, "separation": 3.0}
}"#;

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_artifacts_with_cadence_rows() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let out = dir.path().join("run");
    let o = fedar(&["run", "--config", &config, "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rounds = fs::read_to_string(out.join("rounds.csv")).unwrap();
    // ceil(7 / 3) = 3 evaluated rounds: 3, 6 and the final round 7.
    let lines: Vec<&str> = rounds.lines().collect();
    assert_eq!(lines[0], "round,global_train_loss,global_test_accuracy,participating,contributors");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("7,"));
    for f in ["final_model.bin", "per_client.csv", "bias.csv", "config.echo.json", "meta.json", "timing.csv"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let meta = fs::read_to_string(out.join("meta.json")).unwrap();
    assert!(meta.contains("\"seed\": 11") && meta.contains("git_hash"));
}

#[test]
fn identical_runs_give_identical_rounds_csv() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(fedar(&["run", "--config", &config, "--out", s(&a)]).status.success());
    assert!(fedar(&["run", "--config", &config, "--out", s(&b)]).status.success());
    assert_eq!(fs::read(a.join("rounds.csv")).unwrap(), fs::read(b.join("rounds.csv")).unwrap());
}

#[test]
fn seed_and_strategy_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let out = dir.path().join("run");
    let o = fedar(&["run", "--config", &config, "--out", s(&out), "--seed", "99", "--strategy", "scaffold"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let echo = fs::read_to_string(out.join("config.echo.json")).unwrap();
    assert!(echo.contains("\"seed\": 99") && echo.contains("\"strategy\": \"scaffold\""));
}

#[test]
fn validation_and_io_failures_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), &CONFIG.replace("\"seed\": 11", "\"rho\": 1.5"));
    let o = fedar(&["run", "--config", &bad, "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("rho"));

    let good = write_config(dir.path(), CONFIG);
    let blocker = dir.path().join("blocker");
    fs::write(&blocker, "").unwrap();
    let o = fedar(&["run", "--config", &good, "--out", s(&blocker.join("out"))]);
    assert_eq!(o.status.code(), Some(3));

    let o = fedar(&["run", "--config", s(&dir.path().join("missing.json")), "--out", s(&dir.path().join("y"))]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn sweep_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let spec = format!(
        r#"{{"base": {CONFIG}, "axis": {{"name": "p_min", "values": [0.2, 0.6]}},
            "strategies": ["fedar", "fedavg"], "seeds": [1, 2, 3]}}"#
    );
    let spec_path = dir.path().join("sweep.json");
    fs::write(&spec_path, spec).unwrap();
    let out = dir.path().join("sweep");
    let o = fedar(&["sweep", "--config", s(&spec_path), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(out.join("sweep_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 5);
    assert!(out.join("p_min=0.6/fedavg/seed=3/rounds.csv").is_file());

    let report = dir.path().join("report");
    let o = fedar(&["report", s(&out), "--out", s(&report)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stats = fs::read_to_string(report.join("stats.csv")).unwrap();
    assert!(stats.starts_with("strategy,mean,var,worst10,best10"));
    let ttest = fs::read_to_string(report.join("ttest.csv")).unwrap();
    assert!(ttest.lines().nth(1).unwrap().starts_with("fedar,fedavg,"));
}

#[test]
fn failed_sweep_cells_exit_with_sweep_code() {
    let dir = tempfile::tempdir().unwrap();
    let spec = format!(r#"{{"base": {CONFIG}, "axis": {{"name": "num_clients", "values": [4, 200]}}, "strategies": ["fedar"], "seeds": [0]}}"#);
    let spec_path = dir.path().join("sweep.json");
    fs::write(&spec_path, spec).unwrap();
    let o = fedar(&["sweep", "--config", s(&spec_path), "--out", s(&dir.path().join("sweep"))]);
    assert_eq!(o.status.code(), Some(5));
    assert!(dir.path().join("sweep/num_clients=4/fedar/seed=0/rounds.csv").is_file());
}

#[test]
fn shapley_writes_one_row_per_level_and_client() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{"strategy": "fedar", "num_clients": 5, "rounds": 9, "batch_size": 16,
            "dataset": {"kind": "synthetic", "num_classes": 10, "per_class": 30, "input_dim": 4, "separation": 3.0}}"#,
    );
    let out = dir.path().join("shap");
    let o = fedar(&["shapley", "--config", &config, "--out", s(&out), "--levels", "0,3,6"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("shapley.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "level,client,phi,percent");
    assert_eq!(csv.lines().count(), 1 + 3 * 5);
}

#[test]
fn unknown_strategy_is_rejected_by_the_parser() {
    let o = fedar(&["run", "--config", "c.json", "--out", "o", "--strategy", "fedsgd"]);
    assert_eq!(o.status.code(), Some(2));
}
