//! Every flag of every subcommand: a config value beats the default, a flag
//! beats the config value, and a manifest replays its run.

use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;
use tempfile::TempDir;

/// (key, config value, config value when the flag is also given, flag value)
type Row = (&'static str, &'static str, &'static str, &'static str);

fn run(dir: &Path, args: &[String]) {
    let out = Command::new(env!("CARGO_BIN_EXE_locpred"))
        .current_dir(dir)
        .env_remove("LOCPRED_OUTPUT_DIR")
        .args(args)
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn toml_value(v: &str) -> String {
    if v.starts_with('[') || v.parse::<f64>().is_ok() || v.parse::<bool>().is_ok() {
        v.to_string()
    } else {
        format!("\"{v}\"")
    }
}

fn write_config(dir: &Path, name: &str, rows: &[Row], pick: fn(&Row) -> &'static str) {
    let text: String = rows.iter().map(|r| format!("{} = {}\n", r.0, toml_value(pick(r)))).collect();
    fs::write(dir.join(name), text).unwrap();
}

fn matches(v: &Value, expected: &str) -> bool {
    if expected.starts_with('[') {
        return *v == serde_json::from_str::<Value>(expected).unwrap();
    }
    match v {
        Value::String(s) => s == expected,
        Value::Bool(b) => expected.parse() == Ok(*b),
        Value::Number(n) => expected.parse::<f64>().is_ok_and(|e| n.as_f64() == Some(e)),
        _ => false,
    }
}

fn manifest(dir: &Path, out: &str) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join(format!("{out}.manifest.json"))).unwrap()).unwrap()
}

fn out_of(rows: &[Row], pick: fn(&Row) -> &'static str) -> &'static str {
    pick(rows.iter().find(|r| r.0 == "out").unwrap())
}

fn flag_args(rows: &[Row]) -> Vec<String> {
    let mut args = Vec::new();
    for r in rows {
        if r.3.starts_with('[') {
            for item in serde_json::from_str::<Vec<String>>(r.3).unwrap() {
                args.extend([format!("--{}", r.0), item]);
            }
        } else {
            args.extend([format!("--{}", r.0), r.3.to_string()]);
        }
    }
    args
}

fn check(dir: &Path, sub: &str, rows: &[Row]) {
    write_config(dir, "a.toml", rows, |r| r.1);
    run(dir, &["--config".into(), "a.toml".into(), sub.into()]);
    let a_out = out_of(rows, |r| r.1);
    let m = manifest(dir, a_out);
    for r in rows {
        assert!(matches(&m["config"][r.0], r.1), "{sub} {}: config value lost, got {}", r.0, m["config"][r.0]);
    }
    let first = fs::read(dir.join(a_out)).unwrap();

    write_config(dir, "b.toml", rows, |r| r.2);
    let (globals, locals): (Vec<Row>, Vec<Row>) = rows.iter().partition(|r| r.0 == "jobs");
    let mut args: Vec<String> = vec!["--config".into(), "b.toml".into()];
    args.extend(flag_args(&globals));
    args.push(sub.into());
    args.extend(flag_args(&locals));
    run(dir, &args);
    let m = manifest(dir, out_of(rows, |r| r.3));
    for r in rows {
        assert!(matches(&m["config"][r.0], r.3), "{sub} {}: flag lost, got {}", r.0, m["config"][r.0]);
    }

    fs::remove_file(dir.join(a_out)).unwrap();
    run(dir, &["--config".into(), format!("{a_out}.manifest.json"), sub.into()]);
    if sub != "bench" {
        assert_eq!(fs::read(dir.join(a_out)).unwrap(), first, "{sub}: manifest replay differs");
    }
}

#[test]
fn gen_flags() {
    let d = TempDir::new().unwrap();
    let rows: &[Row] = &[
        ("jobs", "1", "1", "2"),
        ("users", "2", "5", "3"),
        ("minutes", "60", "90", "61"),
        ("seed", "7", "9", "8"),
        ("block", "100", "90", "110"),
        ("v-mean", "70", "60", "71"),
        ("v-sd", "10", "9", "11"),
        ("anchors", "3", "5", "4"),
        ("max-dwell", "3", "5", "4"),
        ("city-blocks", "30", "20", "31"),
        ("out", "a.csv", "x.csv", "b.csv"),
    ];
    check(d.path(), "gen", rows);
    run(d.path(), &["gen".into(), "--out".into(), "c.csv".into()]);
    let m = manifest(d.path(), "c.csv");
    for r in rows {
        assert!(!m["config"][r.0].is_null(), "{} default not recorded", r.0);
    }
}

#[test]
fn pipeline_flags() {
    let d = TempDir::new().unwrap();
    let dir = d.path();
    run(dir, &["gen", "--users", "40", "--minutes", "480", "--seed", "3"].map(String::from));
    fs::copy(dir.join("synthetic.csv"), dir.join("other.csv")).unwrap();

    let pre: &[Row] = &[
        ("input", "synthetic.csv", "missing.csv", "other.csv"),
        ("mode", "walk", "vehicle", "walk"),
        ("cell-size", "20", "25", "25"),
        ("region", "200", "150", "250"),
        ("seq-len", "9", "5", "8"),
        ("horizon", "1", "3", "2"),
        ("bound", "100", "80", "120"),
        ("keep-standing-still", "false", "false", "true"),
        ("raw-counts", "false", "false", "true"),
        ("history-fraction", "0.75", "0.5", "0.7"),
        ("interval", "60", "60", "60"),
        ("gap", "180", "120", "240"),
        ("out", "dataset.bin", "x.bin", "pre-b.bin"),
    ];
    check(dir, "preprocess", pre);
    fs::copy(dir.join("dataset.bin"), dir.join("other.bin")).unwrap();

    let train: &[Row] = &[
        ("data", "dataset.bin", "missing.bin", "other.bin"),
        ("model", "fglp", "cnn", "bilstm_only"),
        ("preset", "desk", "full", "desk"),
        ("lr", "0.003", "0.1", "0.002"),
        ("seed", "1", "5", "2"),
        ("split-seed", "1", "5", "2"),
        ("split-unit", "sample", "sample", "user"),
        ("epochs", "1", "50", "2"),
        ("patience", "1", "5", "2"),
        ("batch-size", "16", "8", "32"),
        ("out", "model.ckpt", "x.ckpt", "train-b.ckpt"),
    ];
    check(dir, "train", train);
    fs::copy(dir.join("model.ckpt"), dir.join("other.ckpt")).unwrap();

    let fl: &[Row] = &[
        ("data", "dataset.bin", "missing.bin", "other.bin"),
        ("augment", "on", "on", "off"),
        ("preset", "desk", "full", "desk"),
        ("lr", "0.003", "0.1", "0.002"),
        ("seed", "1", "5", "2"),
        ("split-seed", "1", "5", "2"),
        ("rounds", "1", "50", "2"),
        ("clients-per-round", "2", "30", "3"),
        ("local-epochs", "1", "5", "1"),
        ("local-batch-size", "16", "8", "32"),
        ("aug-samples", "50", "500", "60"),
        ("aug-user-fraction", "0.05", "0.5", "0.06"),
        ("max-local-steps", "0", "1", "100"),
        ("drop-stragglers", "false", "false", "true"),
        ("persist-optimizer", "false", "false", "true"),
        ("weighting", "sample-count", "sample-count", "uniform"),
        ("out", "fl.ckpt", "x.ckpt", "fl-b.ckpt"),
    ];
    check(dir, "train-fl", fl);

    let eval: &[Row] = &[
        ("data", "dataset.bin", "missing.bin", "other.bin"),
        ("model-file", r#"["model.ckpt"]"#, r#"["missing.ckpt"]"#, r#"["other.ckpt","model.ckpt"]"#),
        ("ho", "true", "true", "false"),
        ("on", "test", "test", "all"),
        ("split-seed", "1", "5", "2"),
        ("split-unit", "sample", "sample", "user"),
        ("seed", "1", "5", "2"),
        ("out", "eval.json", "x.json", "eval-b.json"),
    ];
    check(dir, "eval", eval);

    let predict: &[Row] = &[
        ("model-file", "model.ckpt", "missing.ckpt", "other.ckpt"),
        ("data", "dataset.bin", "missing.bin", "other.bin"),
        ("index", "0", "99999999", "1"),
        ("out", "p.json", "x.json", "p-b.json"),
    ];
    check(dir, "predict", predict);

    let bench: &[Row] = &[
        ("model-file", "model.ckpt", "missing.ckpt", "other.ckpt"),
        ("data", "dataset.bin", "missing.bin", "other.bin"),
        ("n", "3", "0", "4"),
        ("batch-size", "8", "0", "16"),
        ("out", "bench.json", "x.json", "bench-b.json"),
    ];
    check(dir, "bench", bench);
}
