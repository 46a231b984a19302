//! End-to-end runs of the `afpm` binary on small synthetic data.

use std::path::Path;
use std::process::{Command, Output};

fn afpm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_afpm"))
        .current_dir(dir)
        .env_remove("AFPM_DATA_ROOT")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = afpm(dir, args);
    assert!(
        out.status.success(),
        "afpm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const TINY: [&str; 8] = ["--depth", "1", "--max-steps", "4", "--batch-size", "8", "--threads", "1"];

fn prepare(dir: &Path, task: &str, trials: &str) {
    ok(dir, &["synth", "--task", task, "--domains", "2", "--trials", trials, "--out", &format!("{task}-raw"), "--seed", "5"]);
    ok(dir, &["preprocess", "--in", &format!("{task}-raw"), "--out", &format!("{task}-pre")]);
    ok(dir, &["align", "--in", &format!("{task}-pre"), "--out", &format!("{task}-al"), "--task", task]);
}

fn train(dir: &Path, task: &str, out: &str) {
    let mut args = vec!["train", "--data", "mi-al", "--task", task, "--out", out, "--seed", "3"];
    if task == "erp" {
        args[2] = "erp-al";
    }
    args.extend(TINY);
    ok(dir, &args);
}

#[test]
fn pipeline_runs_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir, "mi", "12");
    train(dir, "mi", "m.ckpt");
    for f in ["m.ckpt", "m.ckpt.config.json", "m.ckpt.loss.csv", "mi-pre/config.json"] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
    let csv = std::fs::read_to_string(dir.join("m.ckpt.loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);

    let table = ok(dir, &["eval", "--ckpt", "m.ckpt", "--data", "mi-al", "--task", "mi", "--folds", "2", "--out", "r.json"]);
    assert!(table.contains("balanced_accuracy"), "{table}");
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("r.json")).unwrap()).unwrap();
    assert_eq!(report[0]["n_trials"], 24);
    assert_eq!(report[0]["folds"].as_array().unwrap().len(), 2);

    // preprocessed data is aligned on the fly with the checkpoint's layout
    let again = ok(dir, &["eval", "--ckpt", "m.ckpt", "--data", "mi-pre", "--task", "mi", "--folds", "2"]);
    assert_eq!(again, table);

    let ft = ok(dir, &["finetune", "--ckpt", "m.ckpt", "--data", "mi-al", "--out", "tuned", "--max-steps", "2", "--batch-size", "4"]);
    assert!(ft.contains("before"), "{ft}");
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("tuned/report.json")).unwrap()).unwrap();
    let subjects = report["subjects"].as_array().unwrap();
    assert_eq!(subjects.len(), 2);
    let ckpts = std::fs::read_dir(dir.join("tuned")).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ckpt")).count();
    assert_eq!(ckpts, 2);

    // echoed config reproduces the run
    let mut args = vec!["train", "--data", "mi-al", "--task", "mi", "--out", "m2.ckpt", "--config", "m.ckpt.config.json"];
    args.extend(["--threads", "1"]);
    ok(dir, &args);
    assert_eq!(std::fs::read(dir.join("m.ckpt")).unwrap(), std::fs::read(dir.join("m2.ckpt")).unwrap());
}

#[test]
fn task_mismatch_and_config_errors_have_distinct_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir, "mi", "8");
    prepare(dir, "erp", "12");
    train(dir, "erp", "e.ckpt");

    let out = afpm(dir, &["eval", "--ckpt", "e.ckpt", "--data", "mi-al", "--task", "mi"]);
    assert_eq!(out.status.code(), Some(6));
    let out = afpm(dir, &["eval", "--ckpt", "e.ckpt", "--data", "mi-al", "--task", "erp"]);
    assert_eq!(out.status.code(), Some(6));

    std::fs::write(dir.join("bad.json"), r#"{"train": {"epoch": 3}}"#).unwrap();
    let out = afpm(dir, &["train", "--data", "mi-al", "--task", "mi", "--out", "x.ckpt", "--config", "bad.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.epoch"));

    let out = afpm(dir, &["eval", "--ckpt", "missing.ckpt", "--data", "mi-al", "--task", "mi"]);
    assert_eq!(out.status.code(), Some(5));

    std::fs::write(dir.join("mi-al").join("manifest.json"), "{").unwrap();
    let out = afpm(dir, &["eval", "--ckpt", "e.ckpt", "--data", "mi-al", "--task", "erp"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn data_root_resolves_relative_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("root");
    std::fs::create_dir_all(&root).unwrap();
    ok(&root, &["synth", "--task", "erp", "--domains", "2", "--trials", "12", "--out", "raw", "--seed", "1"]);
    let work = tmp.path().join("work");
    std::fs::create_dir_all(&work).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_afpm"))
        .current_dir(&work)
        .env("AFPM_DATA_ROOT", &root)
        .args(["preprocess", "--in", "raw", "--out", "pre"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(work.join("pre").join("manifest.json").exists());
}
