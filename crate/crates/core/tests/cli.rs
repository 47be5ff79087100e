mod common;

use std::collections::BTreeMap;
use std::path::Path;

use common::{path_str, run_cli, TINY_NET};
use vffm::train::data::write_synthetic_dataset;

fn key_values(text: &str) -> BTreeMap<String, String> {
    text.split_whitespace()
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn train(data: &Path, run: &Path, seed: &str) -> common::CliOutput {
    let mut args = vec!["train", "--data", path_str(data), "--run-dir", path_str(run), "--epochs", "1", "--batch-size", "2", "--seed", seed];
    args.extend(TINY_NET);
    run_cli(&args)
}

#[test]
fn missing_masks_is_a_dataset_error() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_dataset(dir.path(), 4, 32, 0).unwrap();
    std::fs::remove_dir_all(dir.path().join("masks")).unwrap();
    let r = train(dir.path(), &dir.path().join("run"), "0");
    assert_eq!(r.code, 2, "{}", r.stderr);
    assert!(r.stderr.contains("masks"), "{}", r.stderr);
}

#[test]
fn unknown_config_key_names_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "heads = 4\n# comment\nlearning_rate = 3\n").unwrap();
    let r = run_cli(&["--config", path_str(&cfg), "summary"]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("line 3") && r.stderr.contains("learning_rate"), "{}", r.stderr);
    let r = run_cli(&["--set", "batch_size=0", "summary"]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("batch_size"), "{}", r.stderr);
}

#[test]
fn train_eval_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_synthetic_dataset(&data, 10, 40, 1).unwrap();
    let run = dir.path().join("run");
    let r = train(&data, &run, "7");
    assert_eq!(r.code, 0, "{}", r.stderr);
    for f in ["weights.bin", "metrics.csv", "config.resolved"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("epoch,lr,train_loss,val_miou"));
    assert_eq!(csv.lines().count(), 2);
    assert!(key_values(r.stdout.lines().last().unwrap()).contains_key("best_epoch"));

    // the snapshot carries the network shape and normalisation
    let r = run_cli(&["eval", "--run", path_str(&run), "--split", "val"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let kv = key_values(&r.stdout);
    for name in ["mIoU", "DSC", "Acc", "Sen", "Spe"] {
        let v = &kv[name];
        assert_eq!(v.split('.').nth(1).map(str::len), Some(2), "{name}={v}");
        let x: f64 = v.parse().unwrap();
        assert!((0.0..=100.0).contains(&x));
    }
    let order: Vec<&str> = r.stdout.lines().filter_map(|l| l.split_once('=').map(|p| p.0)).collect();
    assert_eq!(&order[1..], ["mIoU", "DSC", "Acc", "Sen", "Spe"]);

    let input = std::fs::read_dir(data.join("images")).unwrap().next().unwrap().unwrap().path();
    let output = dir.path().join("mask.png");
    let r = run_cli(&["predict", "--run", path_str(&run), "--input", path_str(&input), "--output", path_str(&output)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let mask = image::open(&output).unwrap().to_luma8();
    assert_eq!(mask.dimensions(), (40, 40));
    assert!(mask.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
}

#[test]
fn same_seed_gives_identical_weight_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_synthetic_dataset(&data, 6, 32, 2).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(train(&data, &a, "7").code, 0);
    assert_eq!(train(&data, &b, "7").code, 0);
    let wa = std::fs::read(a.join("weights.bin")).unwrap();
    assert_eq!(wa, std::fs::read(b.join("weights.bin")).unwrap());
    assert_eq!(
        std::fs::read(a.join("metrics.csv")).unwrap(),
        std::fs::read(b.join("metrics.csv")).unwrap()
    );
}

#[test]
fn corrupt_weights_are_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_synthetic_dataset(&data, 4, 32, 3).unwrap();
    let bad = dir.path().join("bad.bin");
    std::fs::write(&bad, b"VFFX\x01\0\0\0").unwrap();
    let mut args = vec!["eval", "--weights", path_str(&bad), "--data", path_str(&data), "--split", "train"];
    args.extend(TINY_NET);
    let r = run_cli(&args);
    assert_eq!(r.code, 1, "{}", r.stderr);
    assert!(r.stderr.contains("at byte 0"), "{}", r.stderr);
    let missing = dir.path().join("none.bin");
    args[2] = path_str(&missing);
    assert_eq!(run_cli(&args).code, 2);
}

#[test]
fn summary_is_key_value_then_stage_table() {
    let r = run_cli(&["summary"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let (head, table) = r.stdout.split_once("stage,params,flops\n").unwrap();
    let kv = key_values(head);
    assert_eq!(kv["params"], "236527");
    let gflops: f64 = kv["gflops"].parse().unwrap();
    assert!(gflops > 0.494 / 2.0 && gflops < 0.494 * 2.0);
    assert_eq!(table.lines().count(), 13);
    let total: u64 = table.lines().map(|l| l.split(',').nth(2).unwrap().parse::<u64>().unwrap()).sum();
    assert_eq!(total.to_string(), kv["flops"]);
}

#[test]
fn bench_validates_before_running() {
    let r = run_cli(&["bench-attn", "--sizes", "256", "--repeats", "1"]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("repeats"));
    let r = run_cli(&["bench-attn", "--mode", "naive", "--sizes", "256,16384"]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("4096"), "{}", r.stderr);
    let r = run_cli(&["bench-attn", "--sizes", "300"]);
    assert_eq!(r.code, 1);
}

#[test]
fn bench_writes_one_csv_row_per_size() {
    let r = run_cli(&["bench-attn", "--sizes", "64,256", "--mode", "naive", "--channels", "4", "--heads", "2", "--d", "8"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let mut rows = csv::Reader::from_reader(r.stdout.as_bytes());
    assert_eq!(
        rows.headers().unwrap(),
        vec!["mode", "hw", "channels", "heads", "d", "median_ms", "flops"]
    );
    let records: Vec<csv::StringRecord> = rows.records().map(Result::unwrap).collect();
    assert_eq!(records.len(), 2);
    assert_eq!(&records[1][0], "naive");
    assert_eq!(&records[1][1], "256");
    assert_eq!(records[1][6].parse::<u64>().unwrap(), common::vf_flops(4, 256, 2, 8, true));
}

#[test]
fn gradcheck_exit_codes() {
    let r = run_cli(&["gradcheck", "--target", "vf"]);
    assert_eq!(r.code, 0, "{}{}", r.stdout, r.stderr);
    let last = key_values(r.stdout.lines().last().unwrap());
    assert_eq!(last["status"], "pass");
    assert!(last["max_rel_error"].parse::<f64>().unwrap() <= 1e-5);

    let r = run_cli(&["gradcheck", "--target", "gf", "--fault"]);
    assert_eq!(r.code, 4);
    let worst = &key_values(r.stdout.lines().last().unwrap())["worst"];
    assert!(worst.starts_with("b.gf.") || ["x", "x1", "x2", "x3"].contains(&worst.as_str()), "{worst}");

    assert_eq!(run_cli(&["gradcheck", "--target", "vf", "--eps", "0"]).code, 1);
    assert_eq!(run_cli(&["gradcheck", "--target", "attention"]).code, 1);
}

#[test]
fn binary_reports_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_vffm");
    let out = std::process::Command::new(exe).args(["bench-attn", "--repeats", "2"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = std::process::Command::new(exe).arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("gradcheck"));
}
