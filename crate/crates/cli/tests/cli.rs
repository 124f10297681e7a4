//! Black-box tests of the `dcrm` binary: artifact layout, determinism,
//! error paths and exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn dcrm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcrm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn gen_data(dir: &Path, case: &str, dof: &str, train: &str, test: &str, labels: &str) {
    let out = dcrm(&[
        "gen-data",
        "--case",
        case,
        "--dof",
        dof,
        "--train",
        train,
        "--test",
        test,
        "--seed",
        "7",
        "--labels",
        labels,
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_ok(&out);
}

#[test]
fn gen_data_is_deterministic_and_honors_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    gen_data(&a, "2", "9", "4", "6", "off");
    gen_data(&b, "2", "9", "4", "6", "off");
    let ta = std::fs::read(a.join("train.bin")).unwrap();
    let tb = std::fs::read(b.join("train.bin")).unwrap();
    assert_eq!(ta, tb, "same flags produce byte-identical containers");
    assert_eq!(
        std::fs::read(a.join("test.bin")).unwrap(),
        std::fs::read(b.join("test.bin")).unwrap()
    );

    let train = dcrm_core::grid::read_dataset(a.join("train.bin")).unwrap();
    let test = dcrm_core::grid::read_dataset(a.join("test.bin")).unwrap();
    assert_eq!(train.inputs.n(), 4);
    assert_eq!(test.inputs.n(), 6);
    assert!(train.outputs.is_none());
    // The test split reuses the training statistics.
    for (a, b) in train.norm_stats.iter().zip(test.norm_stats.iter()) {
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        assert_eq!(a.std.to_bits(), b.std.to_bits());
    }
    assert!(a.join("manifest.txt").exists());
}

#[test]
fn gen_data_case1_has_a_single_labeled_sample() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("c1");
    let out = dcrm(&[
        "gen-data",
        "--case",
        "1",
        "--dof",
        "9",
        "--seed",
        "7",
        "--labels",
        "on",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let train = dcrm_core::grid::read_dataset(dir.join("train.bin")).unwrap();
    assert_eq!(train.inputs.n(), 1);
    assert!(train.outputs.is_some());
}

#[test]
fn train_emits_metrics_checkpoint_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data, "1", "9", "1", "1", "on");
    let run = tmp.path().join("run");
    let out = dcrm(&[
        "train",
        "--method",
        "dcrm",
        "--data",
        data.to_str().unwrap(),
        "--epochs",
        "8",
        "--eval-every",
        "4",
        "--depth",
        "2",
        "--base-channels",
        "2",
        "--dropout-p",
        "0.0",
        "--seed",
        "3",
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,train_err,test_err,wall_seconds");
    // ceil(8/4) + 1 data rows.
    assert_eq!(lines.len(), 1 + 3);
    assert!(run.join("checkpoint.bin").exists());
    let manifest = std::fs::read_to_string(run.join("manifest.txt")).unwrap();
    assert!(manifest.contains("method=dcrm"));
    assert!(manifest.contains("epochs=8"));
}

#[test]
fn train_rerun_reproduces_the_numeric_log() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data, "1", "9", "1", "1", "on");
    let run_once = |dir: &Path| {
        let out = dcrm(&[
            "train",
            "--method",
            "cpinn",
            "--data",
            data.to_str().unwrap(),
            "--epochs",
            "6",
            "--eval-every",
            "3",
            "--depth",
            "2",
            "--base-channels",
            "2",
            "--seed",
            "5",
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert_ok(&out);
        std::fs::read_to_string(dir.join("metrics.csv")).unwrap()
    };
    let a = run_once(&tmp.path().join("r1"));
    let b = run_once(&tmp.path().join("r2"));
    // All numeric columns are bit-identical; wall time is physical.
    let strip = |csv: &str| -> Vec<String> {
        csv.lines()
            .map(|l| l.rsplit_once(',').map(|(head, _)| head.to_string()).unwrap_or_default())
            .collect()
    };
    assert_eq!(strip(&a), strip(&b));
    // Checkpoints are bit-identical outright.
    assert_eq!(
        std::fs::read(tmp.path().join("r1").join("checkpoint.bin")).unwrap(),
        std::fs::read(tmp.path().join("r2").join("checkpoint.bin")).unwrap()
    );
}

#[test]
fn cnn_without_labels_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data, "2", "9", "2", "2", "off");
    let out = dcrm(&[
        "train",
        "--method",
        "cnn",
        "--data",
        data.to_str().unwrap(),
        "--epochs",
        "1",
        "--out",
        tmp.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("labels required"));
}

#[test]
fn dcrm_on_even_grid_with_simpson_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data, "1", "8", "1", "1", "off");
    let out = dcrm(&[
        "train",
        "--method",
        "dcrm",
        "--data",
        data.to_str().unwrap(),
        "--epochs",
        "1",
        "--out",
        tmp.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("odd"));
}

#[test]
fn divergence_exits_with_code_three_and_saves_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data, "1", "9", "1", "1", "on");
    let run = tmp.path().join("run");
    let out = dcrm(&[
        "train",
        "--method",
        "cpinn",
        "--data",
        data.to_str().unwrap(),
        "--epochs",
        "50",
        "--lr",
        "1e160",
        "--depth",
        "2",
        "--base-channels",
        "2",
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("divergence"));
    assert!(run.join("metrics.csv").exists(), "partial metrics are saved");
}

#[test]
fn eval_matches_the_trainers_final_row_and_checks_shapes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data, "1", "9", "1", "1", "on");
    let run = tmp.path().join("run");
    let out = dcrm(&[
        "train",
        "--method",
        "cpinn",
        "--data",
        data.to_str().unwrap(),
        "--epochs",
        "6",
        "--eval-every",
        "3",
        "--depth",
        "2",
        "--base-channels",
        "2",
        "--seed",
        "5",
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_ok(&out);

    let per_sample = tmp.path().join("per_sample.csv");
    let out = dcrm(&[
        "eval",
        "--ckpt",
        run.join("checkpoint.bin").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--split",
        "train",
        "--out",
        per_sample.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let reported: f64 = stdout
        .lines()
        .find_map(|l| l.strip_prefix("mean_e_abs_normalized "))
        .expect("aggregate line")
        .parse()
        .unwrap();
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let final_train_err: f64 = csv
        .lines()
        .last()
        .unwrap()
        .split(',')
        .nth(2)
        .unwrap()
        .parse()
        .unwrap();
    assert!(
        (reported - final_train_err).abs() <= 1e-12,
        "{reported} vs {final_train_err}"
    );
    let rows = std::fs::read_to_string(per_sample).unwrap();
    assert!(rows.starts_with("sample,e_abs_normalized\n"));
    assert_eq!(rows.lines().count(), 2); // header + one sample

    // Mismatched resolution is a clean usage error.
    let other = tmp.path().join("other");
    gen_data(&other, "1", "17", "1", "1", "on");
    let out = dcrm(&[
        "eval",
        "--ckpt",
        run.join("checkpoint.bin").to_str().unwrap(),
        "--data",
        other.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not match"));
}

#[test]
fn curves_merges_runs_with_method_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data, "1", "9", "1", "1", "on");
    let mut run_dirs = Vec::new();
    for method in ["cnn", "cpinn", "dcrm"] {
        let run = tmp.path().join(method);
        let out = dcrm(&[
            "train",
            "--method",
            method,
            "--data",
            data.to_str().unwrap(),
            "--epochs",
            "4",
            "--eval-every",
            "2",
            "--depth",
            "2",
            "--base-channels",
            "2",
            "--dropout-p",
            "0.0",
            "--out",
            run.to_str().unwrap(),
        ]);
        assert_ok(&out);
        run_dirs.push(run);
    }
    let merged = tmp.path().join("curves.csv");
    let mut args = vec!["curves", "--runs"];
    let strs: Vec<String> = run_dirs.iter().map(|p| p.to_str().unwrap().to_string()).collect();
    args.extend(strs.iter().map(|s| s.as_str()));
    args.extend(["--out", merged.to_str().unwrap()]);
    let out = dcrm(&args);
    assert_ok(&out);
    let text = std::fs::read_to_string(&merged).unwrap();
    assert!(text.starts_with("method,epoch,split,value\n"));
    for method in ["cnn", "cpinn", "dcrm"] {
        assert!(text.lines().any(|l| l.starts_with(&format!("{method},0,train,"))));
        assert!(text.lines().any(|l| l.starts_with(&format!("{method},4,test,"))));
    }
}

#[test]
fn invalid_thread_cap_is_rejected() {
    let out = Command::new(env!("CARGO_BIN_EXE_dcrm"))
        .env("DCRM_THREADS", "zero")
        .args(["gen-data", "--case", "1", "--out", "/tmp/unused"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("DCRM_THREADS"));
}

#[test]
fn unknown_flags_exit_with_usage_code() {
    let out = dcrm(&["train", "--definitely-not-a-flag"]);
    assert_eq!(out.status.code(), Some(2));
}
