mod common;

use std::process::Command;

fn sam(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_sam")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(sam(&["--help"]).status.code(), Some(0));
    assert_eq!(sam(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(sam(&["transform", "--age", "30"]).status.code(), Some(1));
}

#[test]
fn missing_inputs_fail_at_runtime() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let missing = dir.path().join("nope.png");
    let r = sam(&["transform", "--out", out, "--in", missing.to_str().unwrap(), "--age", "30"]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!r.stderr.is_empty());
}

#[test]
fn zero_step_training_writes_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.txt");
    std::fs::write(&cfg, common::TINY_KV).unwrap();
    let out = dir.path().join("run");
    let r = sam(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--steps",
        "0",
    ]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(out.join("train").join("sam.ckpt").exists());
    assert!(out.join("config.txt").exists());

    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "not_a_key=1\n").unwrap();
    let r = sam(&["train", "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
}
