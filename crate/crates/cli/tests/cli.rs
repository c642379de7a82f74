//! End-to-end command-line tests: pipeline wiring, determinism, and error
//! reporting through the binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_hyperform")
}

fn run(args: &[&str]) -> Output {
    Command::new(binary()).args(args).output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("hyperform_cli_{tag}"));
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("cfg.kv");
    std::fs::write(
        &path,
        "epochs=2\nbatch_size=4\nlr0=0.02\nlr_drop_epochs=\nj=7\nr=2\nd=3\ndepth=1\nheads=1\nd_k=8\nt=4\ns=2\ndropout=0\nvariant=two_branch\npool=rank\n",
    )
    .unwrap();
    path
}

#[test]
fn full_pipeline_runs_and_is_deterministic() {
    let dir = workdir("pipeline");
    let data = dir.join("data.jsonl");
    let cfg = tiny_config(&dir);

    let out = run(&[
        "synth", "--classes", "2", "--per-class", "6", "--joints", "7", "--frames", "8",
        "--seed", "3", "--out", data.to_str().unwrap(),
    ]);
    assert_ok(&out);

    let ckpt = dir.join("model.ckpt");
    let out = run(&[
        "train", "--data", data.to_str().unwrap(), "--config", cfg.to_str().unwrap(),
        "--out", ckpt.to_str().unwrap(),
    ]);
    assert_ok(&out);
    assert!(ckpt.exists());

    let out = run(&["eval", "--data", data.to_str().unwrap(), "--model", ckpt.to_str().unwrap()]);
    assert_ok(&out);
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("top1"), "eval output: {text}");

    // Attention export for a trained two-branch model.
    let heat = dir.join("heat");
    let out = run(&[
        "inspect", "--model", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(),
        "--index", "0", "--token", "channel_block", "--out", heat.to_str().unwrap(),
    ]);
    assert_ok(&out);
    assert!(dir.join("heat.csv").exists());
    assert!(dir.join("heat.pgm").exists());

    // Ablation grid, twice: the report must be byte-identical.
    let rep1 = dir.join("report1.csv");
    let rep2 = dir.join("report2.csv");
    for rep in [&rep1, &rep2] {
        let out = run(&[
            "ablate", "--data", data.to_str().unwrap(), "--config", cfg.to_str().unwrap(),
            "--seeds", "2", "--variants", "baseline,mp_only", "--pools", "avg",
            "--out", rep.to_str().unwrap(),
        ]);
        assert_ok(&out);
    }
    let a = std::fs::read(&rep1).unwrap();
    let b = std::fs::read(&rep2).unwrap();
    assert_eq!(a, b, "ablation reports must be byte-identical");
    let text = String::from_utf8(a).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "variant,pool,seed,top1,top5,loss");
    assert_eq!(lines.len(), 1 + 2 * 2);

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn train_and_eval_round_trip_through_checkpoint() {
    let dir = workdir("ckpt");
    let data = dir.join("data.jsonl");
    let cfg = tiny_config(&dir);
    assert_ok(&run(&[
        "synth", "--classes", "2", "--per-class", "4", "--joints", "7", "--frames", "8",
        "--seed", "5", "--out", data.to_str().unwrap(),
    ]));
    let ckpt = dir.join("m.ckpt");
    assert_ok(&run(&[
        "train", "--data", data.to_str().unwrap(), "--config", cfg.to_str().unwrap(),
        "--out", ckpt.to_str().unwrap(),
    ]));
    // Two evals of the same checkpoint agree exactly.
    let a = run(&["eval", "--data", data.to_str().unwrap(), "--model", ckpt.to_str().unwrap()]);
    let b = run(&["eval", "--data", data.to_str().unwrap(), "--model", ckpt.to_str().unwrap()]);
    assert_ok(&a);
    assert_eq!(a.stdout, b.stdout);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn failures_exit_nonzero_with_single_line_diagnostics() {
    let dir = workdir("errors");
    let data = dir.join("data.jsonl");
    assert_ok(&run(&[
        "synth", "--classes", "2", "--per-class", "2", "--joints", "7", "--frames", "8",
        "--seed", "1", "--out", data.to_str().unwrap(),
    ]));

    // Unknown command.
    let out = run(&["frobnicate"]);
    assert!(!out.status.success());

    // Unknown flag.
    let out = run(&["eval", "--data", data.to_str().unwrap(), "--model", "x", "--bogus", "1"]);
    assert!(!out.status.success());

    // Unknown config key is rejected with its line number.
    let bad_cfg = dir.join("bad.kv");
    std::fs::write(&bad_cfg, "epochs=1\nnot_a_key=3\n").unwrap();
    let out = run(&[
        "train", "--data", data.to_str().unwrap(), "--config", bad_cfg.to_str().unwrap(),
        "--out", dir.join("m.ckpt").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2"), "diagnostic should name the line: {err}");
    assert_eq!(err.trim().lines().count(), 1, "single-line diagnostic: {err}");

    // Malformed dataset line is reported with its line number.
    let bad_data = dir.join("bad.jsonl");
    std::fs::write(
        &bad_data,
        "{\"label\":0,\"joints\":[[[0,0,0],[1,1,1]]]}\n{\"label\":1,\"joints\":[[[0,0],[1,1,1]]]}\n",
    )
    .unwrap();
    let out = run(&["eval", "--data", bad_data.to_str().unwrap(), "--model", "nope.ckpt"]);
    assert!(!out.status.success());

    // Missing checkpoint.
    let out = run(&["eval", "--data", data.to_str().unwrap(), "--model", "nope.ckpt"]);
    assert!(!out.status.success());

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn inspect_rejects_tokens_the_variant_cannot_produce() {
    let dir = workdir("tokens");
    let data = dir.join("data.jsonl");
    let cfg = tiny_config(&dir);
    assert_ok(&run(&[
        "synth", "--classes", "2", "--per-class", "3", "--joints", "7", "--frames", "8",
        "--seed", "2", "--out", data.to_str().unwrap(),
    ]));
    let ckpt = dir.join("m.ckpt");
    assert_ok(&run(&[
        "train", "--data", data.to_str().unwrap(), "--config", cfg.to_str().unwrap(),
        "--variant", "baseline", "--out", ckpt.to_str().unwrap(),
    ]));
    let out = run(&[
        "inspect", "--model", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(),
        "--index", "0", "--token", "channel_block", "--out", dir.join("h").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("baseline"), "should name the variant: {err}");
    std::fs::remove_dir_all(&dir).ok();
}
