use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bnmatch::data::{save_csv, SyntheticBenchmark};
use bnmatch::io::read_csv_table;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn bnmatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bnmatch"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, json: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, json).unwrap();
    p
}

fn digest(path: &Path) -> Vec<u8> {
    Sha256::digest(fs::read(path).unwrap()).to_vec()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const PRETRAIN: &str = r#"{"pretrain": {"iterations": 200}}"#;
const ADAPT: &str = r#"{"adapt": {"iterations": 200}}"#;

#[test]
fn pretrain_smoke() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("run");
    let o = bnmatch(&["pretrain", "--quick", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("checkpoint.model").is_file());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("source test accuracy"), "{stdout}");
    let table = read_csv_table(&out.join("metrics.csv")).unwrap();
    assert_eq!(table.header.join(","), "iteration,loss_ce,source_test_acc,seconds");
    assert_eq!(table.rows.len(), 2);
}

#[test]
fn missing_output_directory_names_out_dir() {
    let o = bnmatch(&["pretrain", "--quick"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("out_dir"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", r#"{"pretrain": {"iterations": 5, "momentum": 0.5}}"#);
    let o = bnmatch(&["pretrain", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("momentum"));
}

#[test]
fn adapt_config_has_no_source_path() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", r#"{"source": {"train_csv": "x.csv"}}"#);
    let o = bnmatch(&["adapt", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("source"));
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", PRETRAIN);
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let o = bnmatch(&["pretrain", "--config", s(&cfg), "--seed", "7", "--out", s(&out)]);
        assert_eq!(o.status.code(), Some(0));
    }
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(digest(&a.join("checkpoint.model")), digest(&b.join("checkpoint.model")));
    assert_eq!(digest(&a.join("metrics.csv")), digest(&b.join("metrics.csv")));
}

#[test]
fn deleting_source_data_does_not_change_adaptation() {
    let tmp = TempDir::new().unwrap();
    let source = SyntheticBenchmark::default().source().unwrap();
    let (train, test) = (tmp.path().join("src_train.csv"), tmp.path().join("src_test.csv"));
    save_csv(&source.train, &train).unwrap();
    save_csv(&source.test, &test).unwrap();
    let pre = write_config(
        tmp.path(),
        "pre.json",
        &format!(
            r#"{{"pretrain": {{"iterations": 200}}, "source": {{"train_csv": "{}", "test_csv": "{}"}}}}"#,
            s(&train),
            s(&test)
        ),
    );
    let pre_out = tmp.path().join("pre");
    assert_eq!(bnmatch(&["pretrain", "--config", s(&pre), "--out", s(&pre_out)]).status.code(), Some(0));
    let ad = write_config(tmp.path(), "ad.json", ADAPT);
    let ckpt = pre_out.join("checkpoint.model");
    let first = tmp.path().join("first");
    assert_eq!(
        bnmatch(&["adapt", "--config", s(&ad), "--checkpoint", s(&ckpt), "--out", s(&first)]).status.code(),
        Some(0)
    );
    fs::remove_file(&train).unwrap();
    fs::remove_file(&test).unwrap();
    let second = tmp.path().join("second");
    assert_eq!(
        bnmatch(&["adapt", "--config", s(&ad), "--checkpoint", s(&ckpt), "--out", s(&second)]).status.code(),
        Some(0)
    );
    for f in ["checkpoint.model", "metrics.csv", "summary.txt"] {
        assert_eq!(digest(&first.join(f)), digest(&second.join(f)), "{f}");
    }
}

#[test]
fn adapt_metrics_row_count_and_summary() {
    let tmp = TempDir::new().unwrap();
    let pre = write_config(tmp.path(), "pre.json", r#"{"seeds": [0, 1], "pretrain": {"iterations": 200}}"#);
    let pre_out = tmp.path().join("pre");
    assert_eq!(bnmatch(&["pretrain", "--config", s(&pre), "--out", s(&pre_out)]).status.code(), Some(0));
    assert!(pre_out.join("seed-1").join("checkpoint.model").is_file());
    let ad = write_config(tmp.path(), "ad.json", r#"{"adapt": {"iterations": 250, "log_interval": 50}}"#);
    let out = tmp.path().join("ad");
    let o = bnmatch(&["adapt", "--config", s(&ad), "--checkpoint", s(&pre_out), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("adapted target accuracy") && stdout.contains("over 2 run(s)"), "{stdout}");
    for seed in [0, 1] {
        let table = read_csv_table(&out.join(format!("seed-{seed}")).join("metrics.csv")).unwrap();
        assert_eq!(table.header.join(","), "iteration,loss_im,loss_bnm,loss_total,target_test_acc,seconds");
        assert_eq!(table.rows.len(), 5);
        assert_eq!(table.column("iteration").unwrap(), vec![50.0, 100.0, 150.0, 200.0, 250.0]);
    }
}

#[test]
fn lambda_zero_ablation_runs() {
    let tmp = TempDir::new().unwrap();
    let pre = write_config(tmp.path(), "pre.json", PRETRAIN);
    let pre_out = tmp.path().join("pre");
    assert_eq!(bnmatch(&["pretrain", "--config", s(&pre), "--out", s(&pre_out)]).status.code(), Some(0));
    let ad = write_config(tmp.path(), "ad.json", ADAPT);
    let out = tmp.path().join("ad");
    let o = bnmatch(&[
        "adapt", "--config", s(&ad), "--checkpoint", s(&pre_out), "--lambda", "0", "--out", s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let t = read_csv_table(&out.join("metrics.csv")).unwrap();
    assert_eq!(t.column("loss_total").unwrap(), t.column("loss_im").unwrap());
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let pre = write_config(tmp.path(), "pre.json", PRETRAIN);
    let pre_out = tmp.path().join("pre");
    assert_eq!(bnmatch(&["pretrain", "--config", s(&pre), "--out", s(&pre_out)]).status.code(), Some(0));
    let ad = write_config(
        tmp.path(),
        "ad.json",
        r#"{"adapt": {"iterations": 10}, "benchmark": {"blobs": {"dim": 3}, "shift": {"translation": [0, 0, 0], "scale": [1, 1, 1]}}}"#,
    );
    let o = bnmatch(&["adapt", "--config", s(&ad), "--checkpoint", s(&pre_out), "--out", s(tmp.path())]);
    assert_ne!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint"));

    let o = bnmatch(&["adapt", "--checkpoint", s(&tmp.path().join("nope")), "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_reports_accuracy() {
    let tmp = TempDir::new().unwrap();
    let pre = write_config(tmp.path(), "pre.json", PRETRAIN);
    let pre_out = tmp.path().join("pre");
    assert_eq!(bnmatch(&["pretrain", "--config", s(&pre), "--out", s(&pre_out)]).status.code(), Some(0));
    let out = tmp.path().join("eval");
    let o = bnmatch(&["eval", "--checkpoint", s(&pre_out), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0));
    let t = read_csv_table(&out.join("eval.csv")).unwrap();
    assert_eq!(t.header, vec!["seed", "accuracy"]);
    assert!((0.0..=1.0).contains(&t.rows[0][1]));
}

/// Pretrains seed 0, adapts it, and runs a one-cell sweep with the same
/// settings; returns (adapted accuracy from eval, sweep accuracy).
fn single_cell_matches_adapt(command: &str, grid: &str) -> (f64, f64) {
    let tmp = TempDir::new().unwrap();
    let pre = write_config(tmp.path(), "pre.json", PRETRAIN);
    let pre_out = tmp.path().join("pre");
    assert_eq!(bnmatch(&["pretrain", "--config", s(&pre), "--out", s(&pre_out)]).status.code(), Some(0));
    let ad = write_config(tmp.path(), "ad.json", ADAPT);
    let ad_out = tmp.path().join("ad");
    assert_eq!(
        bnmatch(&["adapt", "--config", s(&ad), "--checkpoint", s(&pre_out), "--out", s(&ad_out)]).status.code(),
        Some(0)
    );
    let ev = tmp.path().join("ev");
    assert_eq!(bnmatch(&["eval", "--checkpoint", s(&ad_out), "--out", s(&ev)]).status.code(), Some(0));
    let adapted = read_csv_table(&ev.join("eval.csv")).unwrap().rows[0][1];

    let sw = write_config(
        tmp.path(),
        "sw.json",
        &format!(r#"{{"seeds": [0], "pretrain": {{"iterations": 200}}, "adapt": {{"iterations": 200}}, {grid}}}"#),
    );
    let sw_out = tmp.path().join("sw");
    let o = bnmatch(&[command, "--config", s(&sw), "--out", s(&sw_out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let sweep = read_csv_table(&sw_out.join("sweep.csv")).unwrap();
    assert_eq!(sweep.rows.len(), 1);
    (adapted, sweep.column("acc").unwrap()[0])
}

#[test]
fn one_value_lambda_sweep_equals_adapt() {
    let (adapted, swept) = single_cell_matches_adapt("sweep-lambda", r#""lambdas": [10]"#);
    assert_eq!(adapted, swept);
}

#[test]
fn full_fraction_cell_equals_adapt() {
    let (adapted, swept) = single_cell_matches_adapt("sweep-size", r#""fractions": [1.0]"#);
    assert_eq!(adapted, swept);
}

#[test]
fn sweep_outputs_are_stable_across_job_counts() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "sw.json",
        r#"{"seeds": [0, 1], "pretrain": {"iterations": 100}, "adapt": {"iterations": 100}, "fractions": [0.1, 0.5, 1.0]}"#,
    );
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for (out, jobs) in [(&a, "1"), (&b, "4")] {
        let o = bnmatch(&["sweep-size", "--config", s(&cfg), "--jobs", jobs, "--out", s(out)]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["sweep.csv", "sweep_summary.csv", "monotone.csv", "summary.txt"] {
        assert_eq!(digest(&a.join(f)), digest(&b.join(f)), "{f}");
    }
    let sweep = read_csv_table(&a.join("sweep.csv")).unwrap();
    assert_eq!(sweep.header, vec!["fraction", "seed", "acc"]);
    assert_eq!(sweep.rows.len(), 6);
    let summary = read_csv_table(&a.join("sweep_summary.csv")).unwrap();
    assert_eq!(summary.header, vec!["fraction", "mean", "std"]);
    assert_eq!(summary.rows.len(), 3);
    let mono = read_csv_table(&a.join("monotone.csv")).unwrap();
    assert_eq!(mono.header, vec!["fraction", "seed", "monotone"]);
}

#[test]
fn invalid_grid_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "sw.json", r#"{"fractions": [0.0]}"#);
    let o = bnmatch(&["sweep-size", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("fractions"));
    let cfg = write_config(tmp.path(), "sw2.json", r#"{"lambdas": []}"#);
    let o = bnmatch(&["sweep-lambda", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn oracle_check_passes_and_reports_sizes() {
    let o = bnmatch(&["oracle-check"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("1000 pairs, 0 violations"), "{stdout}");
    assert!(stdout.contains("max gradient-check error"), "{stdout}");

    let o = bnmatch(&["oracle-check", "--quick"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("500 pairs"));
}

#[test]
fn oracle_check_failure_exits_three() {
    // n below the Monte-Carlo minimum is an invalid request, not a failed check
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "o.json", r#"{"kl_samples": 10}"#);
    assert_eq!(bnmatch(&["oracle-check", "--config", s(&cfg)]).status.code(), Some(2));
    // seed 2 draws a pair whose estimate lands just beyond 3 stderr
    let o = bnmatch(&["oracle-check", "--seed", "2"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("kl/monte-carlo"));
}
