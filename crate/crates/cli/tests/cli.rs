use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn locpred(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_locpred"))
        .current_dir(dir)
        .env_remove("LOCPRED_OUTPUT_DIR")
        .args(args)
        .output()
        .expect("spawn locpred")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = locpred(dir, args);
    assert!(
        out.status.success(),
        "locpred {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn small_dataset(dir: &Path, users: &str) {
    ok(dir, &["gen", "--users", users, "--minutes", "480", "--seed", "3"]);
    ok(dir, &["preprocess", "--input", "synthetic.csv"]);
}

#[test]
fn gen_is_reproducible() {
    let d = TempDir::new().unwrap();
    ok(d.path(), &["gen", "--users", "3", "--minutes", "120", "--out", "a.csv"]);
    ok(d.path(), &["gen", "--users", "3", "--minutes", "120", "--out", "b.csv"]);
    let a = fs::read(d.path().join("a.csv")).unwrap();
    assert_eq!(a, fs::read(d.path().join("b.csv")).unwrap());
    assert!(String::from_utf8_lossy(&a).starts_with("user_id,"));
}

#[test]
fn preprocess_reports_grid_size() {
    let d = TempDir::new().unwrap();
    small_dataset(d.path(), "4");
    let m = json(&d.path().join("dataset.bin.manifest.json"));
    assert_eq!(m["summary"]["m"], 10);
    assert_eq!(m["summary"]["k"], 8);
    assert_eq!(m["subcommand"], "preprocess");
}

#[test]
fn train_eval_predict_bench() {
    let d = TempDir::new().unwrap();
    small_dataset(d.path(), "6");
    ok(d.path(), &["train", "--data", "dataset.bin", "--epochs", "2"]);
    for f in ["model.ckpt", "model.ckpt.history.csv", "model.ckpt.report.json", "model.ckpt.manifest.json"] {
        assert!(d.path().join(f).exists(), "{f} missing");
    }
    let table = ok(d.path(), &["eval", "--data", "dataset.bin", "--model-file", "model.ckpt", "--ho"]);
    let ho_line = table.lines().find(|l| l.starts_with("ho")).unwrap();
    assert!(ho_line.contains("NA"), "{table}");
    let reports = json(&d.path().join("eval.json"));
    assert_eq!(reports.as_array().unwrap().len(), 2);
    assert_eq!(reports[1]["loss"], "NA");
    assert!(fs::read_to_string(d.path().join("eval.json.csv")).unwrap().contains(",NA,"));

    ok(d.path(), &["predict", "--model-file", "model.ckpt", "--data", "dataset.bin", "--index", "1"]);
    let p = json(&d.path().join("prediction.json"));
    let grid = p["grid"].as_array().unwrap();
    assert_eq!(grid.len(), 10);
    let total: f64 = grid.iter().flat_map(|r| r.as_array().unwrap()).map(|v| v.as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);

    ok(d.path(), &["bench", "--model-file", "model.ckpt", "--data", "dataset.bin", "--n", "10"]);
    assert_eq!(json(&d.path().join("bench.json"))["prediction"]["n"], 10);
}

#[test]
fn reruns_are_bitwise_identical() {
    let d = TempDir::new().unwrap();
    small_dataset(d.path(), "6");
    for out in ["a.ckpt", "b.ckpt"] {
        ok(d.path(), &["train", "--data", "dataset.bin", "--epochs", "2", "--out", out]);
    }
    for suffix in ["", ".history.csv", ".report.json"] {
        let a = fs::read(d.path().join(format!("a.ckpt{suffix}"))).unwrap();
        assert_eq!(a, fs::read(d.path().join(format!("b.ckpt{suffix}"))).unwrap(), "{suffix}");
    }
}

#[test]
fn federated_jobs_do_not_change_results() {
    let d = TempDir::new().unwrap();
    small_dataset(d.path(), "40");
    let base = ["train-fl", "--data", "dataset.bin", "--rounds", "2", "--clients-per-round", "3"];
    ok(d.path(), &[&base[..], &["--jobs", "1", "--out", "one.ckpt"]].concat());
    ok(d.path(), &[&base[..], &["--jobs", "2", "--out", "two.ckpt"]].concat());
    assert_eq!(fs::read(d.path().join("one.ckpt")).unwrap(), fs::read(d.path().join("two.ckpt")).unwrap());
    let rounds = fs::read_to_string(d.path().join("one.ckpt.rounds.csv")).unwrap();
    assert_eq!(rounds.lines().count(), 3);
    let report = json(&d.path().join("one.ckpt.report.json"));
    assert_eq!(report["audit"]["violations"], 0);
    assert!(json(&d.path().join("one.ckpt.timings.json"))["round_wall_time_s"].as_array().unwrap().len() == 2);
}

#[test]
fn config_file_sits_between_flags_and_defaults() {
    let d = TempDir::new().unwrap();
    fs::write(d.path().join("run.toml"), "users = 2\nminutes = 60\nseed = 7\nunused_key = 1\n").unwrap();
    let out = locpred(d.path(), &["--config", "run.toml", "gen", "--users", "3"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unused-key"));
    let m = json(&d.path().join("synthetic.csv.manifest.json"));
    assert_eq!(m["config"]["users"], 3);
    assert_eq!(m["config"]["seed"], 7);
    assert_eq!(m["config"]["minutes"], 60);
    assert_eq!(m["config_file"], "run.toml");
}

#[test]
fn output_dir_flag_and_env() {
    let d = TempDir::new().unwrap();
    ok(d.path(), &["--output-dir", "runs/x", "gen", "--users", "1", "--minutes", "30"]);
    assert!(d.path().join("runs/x/synthetic.csv").exists());
    assert!(d.path().join("runs/x/synthetic.csv.manifest.json").exists());
    let out = Command::new(env!("CARGO_BIN_EXE_locpred"))
        .current_dir(d.path())
        .env("LOCPRED_OUTPUT_DIR", "envdir")
        .args(["gen", "--users", "1", "--minutes", "30"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(d.path().join("envdir/synthetic.csv").exists());
}

#[test]
fn exit_codes() {
    let d = TempDir::new().unwrap();
    let bad_flag = locpred(d.path(), &["gen", "--no-such-flag"]);
    assert_eq!(bad_flag.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad_flag.stderr).contains("Usage"));

    let bad_value = locpred(d.path(), &["gen", "--users", "many"]);
    assert_eq!(bad_value.status.code(), Some(1));

    let missing = locpred(d.path(), &["eval", "--data", "missing.bin", "--ho"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("missing.bin"));

    fs::write(d.path().join("junk.bin"), b"not a dataset").unwrap();
    assert_eq!(locpred(d.path(), &["eval", "--data", "junk.bin", "--ho"]).status.code(), Some(2));

    let nothing = locpred(d.path(), &["eval", "--data", "junk.bin"]);
    assert_eq!(nothing.status.code(), Some(1));

    assert_eq!(locpred(d.path(), &["--help"]).status.code(), Some(0));
}
