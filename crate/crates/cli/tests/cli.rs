use std::path::Path;
use std::process::{Command, Output};

fn fedsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedsim"))
        .args(args)
        .env("FEDSIM_THREADS", "1")
        .output()
        .expect("spawn fedsim")
}

fn small_config(dir: &Path, strategy: &str, extra: &str) -> std::path::PathBuf {
    let path = dir.join(format!("{strategy}.cfg"));
    let text = format!(
        "strategy = {strategy}\ndevices = 6\nclients_per_round = 3\nrounds = 4\nd_in = 5\nclasses = 3\n\
         total_samples = 300\nout_dir = {}\n{extra}",
        dir.join("out").display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_writes_csv_and_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "folb_single", "");
    let o = fedsim(&["run", "--config", cfg.to_str().unwrap(), "--seed", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("out/folb_single_seed5.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(dir.path().join("out/folb_single_seed5.jsonl").exists());

    let again = fedsim(&["run", "--config", cfg.to_str().unwrap(), "--seed", "5"]);
    assert!(again.status.success());
    let csv2 = std::fs::read_to_string(dir.path().join("out/folb_single_seed5.csv")).unwrap();
    assert_eq!(csv, csv2);
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.txt");
    std::fs::write(&spec, "alpha = 0.5\nbeta = 0.5\ndevices = 5\nd_in = 4\nclasses = 3\ntotal_samples = 200\nseed = 3\n").unwrap();
    let a = dir.path().join("a.bin");
    let b = dir.path().join("b.bin");
    for out in [&a, &b] {
        let o = fedsim(&["gen-data", "--spec", spec.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("5 devices"));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn bounds_on_full_information_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "fedprox", "mu = 10\nfull_information = true\n");
    let o = fedsim(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = dir.path().join("out/fedprox_seed0.jsonl");
    let o = fedsim(&["bounds", "--run", run.to_str().unwrap(), "--kind", "thm1", "--mc", "50"]);
    assert!(o.status.success(), "{}{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["holds"], serde_json::Value::Bool(true));
    assert_eq!(report["rounds"].as_array().unwrap().len(), 4);
}

#[test]
fn bounds_rejects_run_without_full_information() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "fedavg", "");
    assert!(fedsim(&["run", "--config", cfg.to_str().unwrap()]).status.success());
    let run = dir.path().join("out/fedavg_seed0.jsonl");
    let o = fedsim(&["bounds", "--run", run.to_str().unwrap(), "--kind", "prop1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn oracle_lemma1_json() {
    let o = fedsim(&["oracle", "lemma1", "--n", "3", "--k", "2"]);
    assert!(o.status.success());
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let lhs = r["lhs14_indep"].as_f64().unwrap();
    let rhs = r["rhs14"].as_f64().unwrap();
    assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1.0));
    assert_eq!(r["exhaustive"], serde_json::Value::Bool(true));
}

#[test]
fn oracle_lemma1_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let grads = dir.path().join("g.csv");
    std::fs::write(&grads, "1,0\n0,1\n").unwrap();
    let o = fedsim(&["oracle", "lemma1", "--n", "2", "--k", "1", "--grads", grads.to_str().unwrap()]);
    assert!(o.status.success());
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((r["rhs14"].as_f64().unwrap() - 0.25).abs() < 1e-12);
    assert!((r["lhs14_exact"].as_f64().unwrap() - 1.0).abs() < 1e-12);

    let o = fedsim(&["oracle", "lemma1", "--n", "3", "--k", "1", "--grads", grads.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn grid_ranks_points() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "folb_het", "psi = 0\n");
    let o = fedsim(&["grid", "--config", cfg.to_str().unwrap(), "--mu", "0.01,0.1", "--psi", "0,1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 4);
    assert!(out.starts_with("1\t"));
}

#[test]
fn bad_config_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    std::fs::write(&path, "strategy = fedavg\nlearning_rat = 0.1\n").unwrap();
    let o = fedsim(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rat"));

    std::fs::write(&path, "strategy = fedavg\npsi = 1\n").unwrap();
    assert_eq!(fedsim(&["run", "--config", path.to_str().unwrap()]).status.code(), Some(2));
}
