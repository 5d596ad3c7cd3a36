use std::path::Path;
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdernn::cli::{EXIT_CONFIG, EXIT_IO, TIME_SCALE};
use sdernn::sde_rnn::ModelParams;
use sdernn::training::{load_checkpoint, SdeRnnCheckpoint};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdernn"))
        .current_dir(dir)
        .env("SDERNN_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn zero_epochs_keep_initial_parameters() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--seed", "1"]);
    ok(dir.path(), &["train", "--epochs", "0", "--seed", "7", "--model", "sde-rnn", "--sde-width", "8"]);
    let ckpt: SdeRnnCheckpoint = load_checkpoint(dir.path().join("runs/sde_rnn.json"), SdeRnnCheckpoint::KIND).unwrap();
    let init = ModelParams::random(5, 1, 8, TIME_SCALE, &mut ChaCha8Rng::seed_from_u64(7));
    assert_eq!(ckpt.params, init);
}

#[test]
fn imputed_output_marks_observations() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--seed", "2"]);
    ok(dir.path(), &["train", "--epochs", "1", "--model", "sde-rnn", "--sde-width", "8"]);
    ok(dir.path(), &["impute"]);
    let text = read(dir.path().join("runs/imputed.csv"));
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("record_id,time,mean,variance,observed"));
    let (mut observed, mut total) = (0, 0);
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let var: f64 = f[3].parse().unwrap();
        assert!(var >= 0.0);
        if f[4] == "1" {
            observed += 1;
            assert!(var > 0.0, "observed row without aleatoric variance: {line}");
        }
        total += 1;
    }
    assert_eq!(total, 4 * 1440);
    assert_eq!(observed, 2 * (96 + 1440));
}

#[test]
fn empty_dataset_yields_header_only_output() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--seed", "3"]);
    ok(dir.path(), &["train", "--epochs", "0", "--model", "sde-rnn", "--sde-width", "8"]);
    std::fs::write(dir.path().join("empty.csv"), "record_id,measurement_type,time,value,mask\n").unwrap();
    ok(dir.path(), &["impute", "--data", "empty.csv", "--out", "empty_out.csv"]);
    assert_eq!(read(dir.path().join("empty_out.csv")), "record_id,time,mean,variance,observed\n");
}

#[test]
fn compare_writes_table_and_plot_series() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--seed", "4"]);
    ok(dir.path(), &["train", "--epochs", "1", "--sde-width", "8", "--mc-samples", "10"]);
    let out = ok(dir.path(), &["compare", "--missing", "0.5"]);
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("sde_rnn") && table.contains("classic_gru"));
    let cmp = read(dir.path().join("runs/compare/comparison.csv"));
    assert_eq!(cmp.lines().next(), Some("model,missing_fraction,mse,ence"));
    assert_eq!(cmp.lines().count(), 3);
    let plot = read(dir.path().join("runs/compare/plot_sde_rnn_0.5_node1_P.csv"));
    assert_eq!(plot.lines().next(), Some("time,truth,mean,lo,hi"));
    let manifest = read(dir.path().join("runs/compare/run_manifest.jsonl"));
    let entry: serde_json::Value = serde_json::from_str(manifest.lines().last().unwrap()).unwrap();
    assert_eq!(entry["status"], "ok");
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["impute"]).status.code(), Some(EXIT_IO));
    std::fs::write(dir.path().join("bad.csv"), "record_id,measurement_type,time,value,mask\nr,P,0,1,2\n").unwrap();
    let out = run(dir.path(), &["train", "--data", "bad.csv"]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    assert_eq!(run(dir.path(), &["train", "--lr", "-1"]).status.code(), Some(EXIT_CONFIG));
}
