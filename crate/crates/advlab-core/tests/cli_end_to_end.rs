//! Drives the compiled binary through the full pipeline: generate data,
//! train a tiny model, then evaluate, attack, and diagnose the artifacts.

use std::path::Path;
use std::process::{Command, Output};

fn advlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advlab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = advlab(args);
    assert!(
        out.status.success(),
        "command {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

const TINY_CONFIG: &str = "\
trainer.epochs = 2
trainer.batch_size = 4
trainer.lr_drop_epochs = none
arch.widths = 2,2
arch.blocks_per_stage = 1
attack.iterations = 1
eval_attack.iterations = 2
loss.variant = v3
eval.per_epoch = robust
";

fn write_config(dir: &Path, train: &Path, test: &Path) -> std::path::PathBuf {
    let path = dir.join("run.cfg");
    let body = format!(
        "{TINY_CONFIG}data.train = {}\ndata.test = {}\n",
        train.display(),
        test.display()
    );
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn pipeline_produces_a_complete_reproducible_run() {
    let tmp = tempfile::tempdir().unwrap();
    let ds_dir = tmp.path().join("ds");
    run_ok(&[
        "gen-data",
        "--out",
        ds_dir.to_str().unwrap(),
        "--classes",
        "2",
        "--per-class-train",
        "8",
        "--per-class-test",
        "4",
        "--size",
        "8",
        "--seed",
        "7",
    ]);
    let train_bin = ds_dir.join("train.bin");
    let test_bin = ds_dir.join("test.bin");
    assert!(train_bin.exists() && test_bin.exists());

    let cfg = write_config(tmp.path(), &train_bin, &test_bin);
    let run_a = tmp.path().join("run-a");
    run_ok(&["train", "--config", cfg.to_str().unwrap(), "--out", run_a.to_str().unwrap()]);

    for name in [
        "config.resolved",
        "checkpoint_init.bin",
        "checkpoint_epoch_000.bin",
        "checkpoint_epoch_001.bin",
        "checkpoint_final.bin",
        "metrics.jsonl",
        "summary.csv",
    ] {
        assert!(run_a.join(name).exists(), "missing {name}");
    }

    // The echoed config must itself be a valid config with every key.
    let resolved = std::fs::read_to_string(run_a.join("config.resolved")).unwrap();
    assert!(resolved.contains("trainer.epochs = 2"));
    assert!(resolved.contains("attack.epsilon = 8/255"));

    let summary = std::fs::read_to_string(run_a.join("summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().collect();
    assert_eq!(rows.len(), 3, "header plus one row per epoch");
    assert!(rows[0].starts_with("epoch,lr,alpha,beta,"));
    // Auto-balance holds alpha + beta = 1 from the first measured epoch on.
    let fields: Vec<&str> = rows[2].split(',').collect();
    let alpha: f64 = fields[2].parse().unwrap();
    let beta: f64 = fields[3].parse().unwrap();
    assert!((alpha + beta - 1.0).abs() < 1e-12);
    // Robust per-epoch eval fills both test columns.
    assert!(!fields[10].is_empty() && !fields[11].is_empty());

    let metrics = std::fs::read_to_string(run_a.join("metrics.jsonl")).unwrap();
    let mut instruments = std::collections::BTreeSet::new();
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).expect("valid JSON per line");
        instruments.insert(v["instrument"].as_str().unwrap().to_string());
    }
    for expected in [
        "loss_total",
        "grad_cosine",
        "grad_conflict_fraction",
        "invariance_distance",
        "feature_distance",
        "representation_similarity",
        "bn_stat_variance",
        "test_clean_acc",
        "test_robust_acc",
        "final_clean_acc",
        "final_robust_acc",
    ] {
        assert!(instruments.contains(expected), "no {expected} records");
    }

    // A second identical invocation reproduces the artifacts byte for byte.
    let run_b = tmp.path().join("run-b");
    run_ok(&["train", "--config", cfg.to_str().unwrap(), "--out", run_b.to_str().unwrap()]);
    for name in ["metrics.jsonl", "summary.csv", "checkpoint_final.bin"] {
        let a = std::fs::read(run_a.join(name)).unwrap();
        let b = std::fs::read(run_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }

    // Eval with a zero-radius attack degenerates to clean accuracy.
    let ckpt = run_a.join("checkpoint_final.bin");
    let out = run_ok(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        test_bin.to_str().unwrap(),
        "--attack.epsilon",
        "0",
        "--attack.iterations",
        "1",
    ]);
    let json_line = out.lines().find(|l| l.starts_with('{')).unwrap();
    let v: serde_json::Value = serde_json::from_str(json_line).unwrap();
    assert_eq!(v["clean_acc"], v["robust_acc"]);
    assert_eq!(v["samples"], 8);

    // Attack records parse and keep perturbations inside the budget.
    let out = run_ok(&[
        "attack",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        test_bin.to_str().unwrap(),
        "--limit",
        "3",
        "--attack.iterations",
        "2",
        "--attack.epsilon",
        "8/255",
    ]);
    let mut count = 0;
    for line in out.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["max_abs_delta"].as_f64().unwrap() <= 8.0 / 255.0 + 1e-12);
        assert_eq!(
            v["success"],
            serde_json::Value::Bool(v["adv_pred"] != v["label"]),
        );
        let pixels = v["adv"].as_array().unwrap();
        assert_eq!(pixels.len(), 64);
        count += 1;
    }
    assert_eq!(count, 3);

    // Checkpoint diagnosis emits the default instrument set.
    let out = run_ok(&[
        "diagnose",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        train_bin.to_str().unwrap(),
        "--attack.iterations",
        "1",
        "--variant",
        "v3",
    ]);
    let seen: std::collections::BTreeSet<String> = out
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            v["instrument"].as_str().unwrap().to_string()
        })
        .collect();
    for expected in [
        "grad_cosine",
        "grad_conflict_fraction",
        "feature_distance",
        "representation_similarity",
        "bn_stat_variance",
    ] {
        assert!(seen.contains(expected), "diagnose missing {expected}");
    }

    // Run-directory diagnosis walks the epoch series and exports plots.
    run_ok(&[
        "diagnose",
        "--run-dir",
        run_a.to_str().unwrap(),
        "--data",
        train_bin.to_str().unwrap(),
        "--attack.iterations",
        "1",
        "--variant",
        "v3",
        "--export-plot",
    ]);
    assert!(run_a.join("plot_loss_total.csv").exists());
    assert!(run_a.join("plot_bn_stat_variance.csv").exists());
    let plot = std::fs::read_to_string(run_a.join("plot_loss_total.csv")).unwrap();
    assert!(plot.starts_with("epoch,layer,branch,value\n"));
    assert_eq!(plot.lines().count(), 3, "header plus one loss row per epoch");
}

#[test]
fn config_and_io_failures_use_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad_cfg = tmp.path().join("bad.cfg");
    std::fs::write(&bad_cfg, "trainer.epoch = 5\n").unwrap();
    let out = advlab(&["train", "--config", bad_cfg.to_str().unwrap(), "--out", "/tmp/ignored"]);
    assert_eq!(exit_code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("trainer.epoch"));

    // Dataset path that does not exist is an I/O failure.
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "trainer.epochs = 1\ntrainer.lr_drop_epochs = none\ndata.train = /nonexistent/train.bin\n",
    )
    .unwrap();
    let out = advlab(&["train", "--config", cfg.to_str().unwrap(), "--out", "/tmp/ignored"]);
    assert_eq!(exit_code(&out), 4);

    let out = advlab(&["eval", "--checkpoint", "/nonexistent.bin", "--data", "/nonexistent.bin"]);
    assert_eq!(exit_code(&out), 4);

    let out = advlab(&["diagnose", "--data", "/tmp/whatever.bin"]);
    assert_eq!(exit_code(&out), 2, "needs --checkpoint or --run-dir");

    let out = advlab(&["--definitely-not-a-flag"]);
    assert_eq!(exit_code(&out), 2);

    let out = advlab(&["--help"]);
    assert_eq!(exit_code(&out), 0);
}

#[test]
fn gen_data_rejects_bad_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    let out = advlab(&[
        "gen-data",
        "--out",
        tmp.path().to_str().unwrap(),
        "--classes",
        "1",
    ]);
    assert_eq!(exit_code(&out), 2);
}
