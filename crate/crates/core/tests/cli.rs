//! End-to-end runs of the command-line tool on a tiny configuration.

use std::path::Path;
use std::process::Command;

const TINY: [&str; 8] = [
    "--set=train.steps=3",
    "--set=train.batch_size=4",
    "--set=train.eval_sequences=4",
    "--set=model.d_model=8",
    "--set=model.d_ff=16",
    "--set=task.seq_len=5",
    "--set=train.snr_grid=-10,10",
    "--set=model.moe.strategy=hard",
];

fn hmoe(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_hmoe")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "hmoe {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_then_analyze_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let mut args = vec!["train", "--out", path(&run)];
    args.extend(TINY);
    hmoe(&args);
    for f in ["config.txt", "metrics.csv", "model.ckpt", "load_report.csv", "eval.csv"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,L_CE,L_B,L_S,L_Z,L_tot"));
    assert_eq!(metrics.lines().count(), 4);

    let ckpt = run.join("model.ckpt");
    let eval = hmoe(&["eval", "--ckpt", path(&ckpt), "--snr=-5,5", "--sequences", "4"]);
    assert!(eval.contains("-5"));
    let sweep_csv = dir.path().join("sweep.csv");
    hmoe(&[
        "sweep-hard",
        "--ckpt",
        path(&ckpt),
        "--grid",
        "0.25,0.75",
        "--snr=-10,10",
        "--sequences",
        "4",
        "--out",
        path(&sweep_csv),
    ]);
    assert_eq!(std::fs::read_to_string(&sweep_csv).unwrap().lines().count(), 5);
    let load_csv = dir.path().join("load.csv");
    hmoe(&["analyze-load", "--ckpt", path(&ckpt), "--sequences", "4", "--out", path(&load_csv)]);
    assert!(std::fs::read_to_string(&load_csv).unwrap().starts_with("layer,kind,index,condition,value"));
}

#[test]
fn flops_prints_the_dense_anchor() {
    let out = hmoe(&["flops", "--set=model.d_model=768", "--set=model.d_ff=3072"]);
    assert!(out.contains("dense_ffn_per_layer,471.8592"), "{out}");
}

#[test]
fn bad_keys_fail_cleanly() {
    let out = Command::new(env!("CARGO_BIN_EXE_hmoe"))
        .args(["train", "--set=train.nope=1"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}
