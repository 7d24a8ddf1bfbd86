use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--image-size",
    "32",
    "--base-channels",
    "4",
    "--identities-per-split",
    "6",
    "--samples-per-cluster",
    "8",
    "--pretrain-iterations",
    "20",
    "--total-iterations",
    "10",
    "--checkpoint-every",
    "4",
    "--calibration-pairs",
    "200",
];

fn pagn(run_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pagn"))
        .arg("--run-dir")
        .arg(run_dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn tiny(run_dir: &Path, cmd: &[&str]) -> Output {
    let mut args = cmd.to_vec();
    args.extend_from_slice(TINY);
    pagn(run_dir, &args)
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn selftest_passes_and_help_lists_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let o = pagn(dir.path(), &["selftest"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(dir.path().join("selftest/selftest.txt").exists());

    let help = pagn(dir.path(), &["train", "--help"]);
    assert_eq!(code(&help), 0);
    let text = String::from_utf8_lossy(&help.stdout);
    for flag in ["--lambda-a", "--lr0", "--total-iterations", "--discriminator", "--resume"] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
    assert!(text.contains("[default: 2000]"));
}

#[test]
fn contract_violations_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&pagn(dir.path(), &["selftest", "--no-such-flag"])), 1);
    assert_eq!(code(&pagn(dir.path(), &["train", "--lr0", "-1"])), 1);

    let o = pagn(dir.path(), &["train"]);
    assert_eq!(code(&o), 1);
    let log = String::from_utf8_lossy(&o.stdout);
    assert!(log.contains("pagn pretrain"), "{log}");

    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"lr0": 0.001, "learning_rate": 3}"#).unwrap();
    assert_eq!(code(&pagn(dir.path(), &["--config", cfg.to_str().unwrap(), "selftest"])), 1);
}

#[test]
fn unreadable_checkpoint_is_an_io_failure() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("checkpoint.bin");
    std::fs::create_dir(&ck).unwrap();
    let o = pagn(dir.path(), &["generate", "--checkpoint", ck.to_str().unwrap(), "--inputs", "x.ppm"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"lr0": 0.001, "total_iterations": 7, "samples_per_cluster": 4}"#).unwrap();
    let o = pagn(dir.path(), &["--config", cfg.to_str().unwrap(), "selftest", "--total-iterations", "9"]);
    assert_eq!(code(&o), 0);
    let written: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("selftest/config.json")).unwrap()).unwrap();
    assert_eq!(written["lr0"], 0.001);
    assert_eq!(written["total_iterations"], 9);
    assert_eq!(written["samples_per_cluster"], 4);
    assert_eq!(written["batch_size"], 8);
}

#[test]
fn tiny_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path();
    assert_eq!(code(&tiny(run, &["gen-data"])), 0);
    assert!(run.join("data/manifest.csv").exists());
    assert_eq!(code(&tiny(run, &["pretrain"])), 0);
    assert!(run.join("pretrain/phi_age.bin").exists() && run.join("pretrain/phi_id.bin").exists());

    assert_eq!(code(&tiny(run, &["train", "--all-clusters"])), 0);
    assert_eq!(code(&tiny(run, &["train", "--all-clusters", "--discriminator", "one_pathway"])), 0);
    let session = run.join("train/pyramid/cluster2");
    let metrics = std::fs::read_to_string(session.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 11);
    let pixel_rows = metrics.lines().skip(1).filter(|l| l.split(',').nth(4) != Some("")).count();
    assert_eq!(pixel_rows, 2);

    // a completed session resumed with the same settings is a no-op
    let ck_before = std::fs::read(session.join("checkpoint.bin")).unwrap();
    assert_eq!(code(&tiny(run, &["train", "--target-cluster", "2", "--resume"])), 0);
    assert_eq!(std::fs::read(session.join("checkpoint.bin")).unwrap(), ck_before);
    assert_eq!(std::fs::read_to_string(session.join("metrics.csv")).unwrap(), metrics);
    // resuming under a different configuration is refused
    assert_eq!(code(&tiny(run, &["train", "--target-cluster", "2", "--resume", "--lr0", "0.01"])), 1);

    assert_eq!(code(&tiny(run, &["eval"])), 0);
    for f in ["aging_accuracy.csv", "verification.csv", "ablation.csv", "report.json"] {
        assert!(run.join("eval").join(f).exists(), "{f}");
    }

    let out = run.join("aged");
    let o = tiny(
        run,
        &["generate", "--checkpoint", session.join("checkpoint.bin").to_str().unwrap(), "--inputs", run.join("data/test").to_str().unwrap(), "--out", out.to_str().unwrap()],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let aged: Vec<_> = std::fs::read_dir(&out).unwrap().filter_map(|e| e.ok()).filter(|e| e.file_name().to_string_lossy().ends_with("_aged2.ppm")).collect();
    assert!(!aged.is_empty());
}
