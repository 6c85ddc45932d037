//! End-to-end tests of the command-line binary: help output, artifact
//! layout, bitwise reproducibility, warm starts, evaluation, checkpoint
//! inspection, and the exit-code contract (0 ok, 1 usage/config errors,
//! 2 divergence).

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_medformer"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

/// Six-step smoke run on one synthetic binary task; small enough that
/// every invocation here finishes in well under a second.
const SMOKE: &str = "run:\n  seed: 7\n  steps: 6\n  batch_size: 4\n  max_lr: 0.002\n  log_every: 3\nmodel:\n  hidden_dim: 16\n  main_layers: 1\n  adapt_in_layers: 1\n  adapt_out_layers: 1\n  num_heads: 2\n  mlp_ratio: 2\n  patch_size: 4\n  latent_tokens: 2\n  latent_dim: 8\n  expander_widths:\n    - 16\ntasks:\n  - name: chestmnist\n    per_class: 3\n";

#[test]
fn help_covers_every_subcommand() {
    let top = run(&["--help"]);
    assert!(top.status.success());
    let text = stdout(&top);
    for sub in ["train", "multitask", "ssl-pretrain", "finetune", "eval", "inspect-checkpoint"] {
        assert!(text.contains(sub), "top-level help must list '{sub}':\n{text}");
    }
    let sub = run(&["train", "--help"]);
    assert!(sub.status.success());
    let text = stdout(&sub);
    for flag in ["--config", "--seed", "--steps", "--lr", "--out"] {
        assert!(text.contains(flag), "train help must list '{flag}':\n{text}");
    }
    assert!(run(&["--version"]).status.success());
}

#[test]
fn unknown_subcommand_exits_one_with_usage() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("Usage") || err.contains("error"), "{err}");
}

#[test]
fn train_smoke_writes_report_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", SMOKE);
    let out_dir = dir.path().join("out");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("train"), "progress goes to stdout");

    let report = std::fs::read_to_string(out_dir.join("report.jsonl")).unwrap();
    let mut steps = 0;
    for line in report.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("step").is_some() && v.get("loss").is_some(), "{line}");
        steps += 1;
    }
    assert!(steps >= 6, "one record per training step plus evals, got {steps}");
    assert!(out_dir.join("best.ckpt").is_file(), "best checkpoint saved");
}

#[test]
fn identical_seeds_reproduce_artifacts_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", SMOKE);
    let mut artifacts = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let out = run(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "stderr: {}", stderr(&out));
        artifacts.push((
            std::fs::read(out_dir.join("report.jsonl")).unwrap(),
            std::fs::read(out_dir.join("best.ckpt")).unwrap(),
        ));
    }
    assert_eq!(artifacts[0].0, artifacts[1].0, "reports must be byte-identical");
    assert_eq!(artifacts[0].1, artifacts[1].1, "checkpoints must be byte-identical");
}

#[test]
fn missing_seed_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", "run:\n  steps: 5\ntasks:\n  - chestmnist\n");
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("seed"), "{}", stderr(&out));
}

#[test]
fn thread_cap_must_be_a_positive_integer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", SMOKE);
    for bad in ["abc", "0", "-2"] {
        let out = bin()
            .args(["train", "--config", cfg.to_str().unwrap()])
            .env("MEDFORMER_THREADS", bad)
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(1), "MEDFORMER_THREADS={bad}");
        assert!(stderr(&out).contains("MEDFORMER_THREADS"), "{}", stderr(&out));
    }
}

#[test]
fn multitask_requires_at_least_two_tasks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", SMOKE);
    let out = run(&["multitask", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("two"), "{}", stderr(&out));
}

#[test]
fn divergence_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    // An absurd learning rate pushes the weights to ~1e200 after one
    // update; the next forward pass overflows and training aborts.
    let cfg = write_config(
        dir.path(),
        "run.cfg",
        &SMOKE.replace("max_lr: 0.002", "max_lr: 1e200\n  clip_norm: none"),
    );
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("diverged at step"), "{}", stderr(&out));
}

#[test]
fn eval_finetune_and_inspect_share_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", SMOKE);
    let out_dir = dir.path().join("out");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let ckpt = out_dir.join("best.ckpt");
    let ckpt_s = ckpt.to_str().unwrap();

    // Plain evaluation prints one JSON line per task.
    let out = run(&["eval", "--config", cfg.to_str().unwrap(), "--from", ckpt_s]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let line = stdout(&out)
        .lines()
        .find(|l| l.starts_with('{'))
        .expect("a JSON result line")
        .to_string();
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    assert_eq!(v["task"], "chestmnist");
    assert_eq!(v["split"], "test");
    assert!(v.get("loss").is_some() && v.get("accuracy").is_some());
    assert!(v.get("ttsa_k").is_none());

    // Test-time sum augmentation is recorded in the result line.
    let out = run(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--from",
        ckpt_s,
        "--ttsa",
        "K=2,reps=2",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let line = stdout(&out).lines().find(|l| l.starts_with('{')).unwrap().to_string();
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    assert_eq!(v["ttsa_k"], 2);
    assert_eq!(v["ttsa_reps"], 2);

    // Fine-tuning warm-starts from the checkpoint and trains normally.
    let ft_dir = dir.path().join("ft");
    let out = run(&[
        "finetune",
        "--config",
        cfg.to_str().unwrap(),
        "--from",
        ckpt_s,
        "--out",
        ft_dir.to_str().unwrap(),
        "--steps",
        "4",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("warm start from"), "{}", stdout(&out));
    assert!(ft_dir.join("report.jsonl").is_file());

    // The header summary names the run without loading any weights.
    let out = run(&["inspect-checkpoint", ckpt_s]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    for needle in ["version:", "dtype: f64", "tensors", "tasks: chestmnist", "latents.task"] {
        assert!(text.contains(needle), "missing '{needle}' in:\n{text}");
    }

    // Corrupt files are a plain error, not a panic.
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let out = run(&["inspect-checkpoint", junk.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("error"), "{}", stderr(&out));
}

#[test]
fn ssl_pretrain_smoke_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", SMOKE);
    let out_dir = dir.path().join("ssl");
    let out = run(&[
        "ssl-pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(out_dir.join("report.jsonl").is_file());
    assert!(out_dir.join("best.ckpt").is_file());
}
