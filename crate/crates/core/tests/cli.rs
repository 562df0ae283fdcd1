use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use kpbe::pipeline::io::frame_file_name;

fn kpbe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kpbe"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Toy clips under `root/clips` and `root/backend`.
fn datagen(root: &Path, frames: usize) {
    let out = kpbe(&["datagen", "--out", p(root), "--frames", &frames.to_string(), "--seed", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

/// Runs stage 1 for two steps and returns the checkpoint path.
fn quick_checkpoint(root: &Path) -> std::path::PathBuf {
    let cfg = root.join("run.cfg");
    fs::write(
        &cfg,
        format!(
            "train.batch_size = 1\ntrain.max_steps = 2\ntrain.log_every = 0\nseed = 3\npaths.data = {}\n",
            p(&root.join("clips"))
        ),
    )
    .unwrap();
    let ckpt = root.join("stage1.ckpt");
    let trace = root.join("trace.csv");
    let out = kpbe(&["train", "--stage", "1", "--config", p(&cfg), "--out", p(&ckpt), "--trace", p(&trace)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = fs::read_to_string(&trace).unwrap();
    assert_eq!(rows.lines().count(), 3, "header plus one row per step");
    ckpt
}

#[test]
fn evaluate_on_identical_directories_reports_perfect_ssim() {
    let dir = tempfile::tempdir().unwrap();
    datagen(dir.path(), 3);
    let clip = dir.path().join("clips/clip_000");
    let json = dir.path().join("report.json");
    let csv = dir.path().join("report.csv");
    let out = kpbe(&["evaluate", "--pred", p(&clip), "--gt", p(&clip), "--json", p(&json), "--csv", p(&csv)]);
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report["mean_ssim"], 1.0);
    assert_eq!(report["frame_count"], 3);
    assert_eq!(report["identical_frames"], 3);
    assert!(fs::read_to_string(&csv).unwrap().lines().count() >= 4);
}

#[test]
fn reenact_with_a_non_orthonormal_matrix_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    datagen(dir.path(), 2);
    let ckpt = quick_checkpoint(dir.path());
    let clip = dir.path().join("clips/clip_000");
    let source = clip.join(frame_file_name(1));
    let out_dir = dir.path().join("novel");
    let out = kpbe(&[
        "reenact",
        "--source",
        p(&source),
        "--backend",
        p(&dir.path().join("backend/clip_000")),
        "--ckpt",
        p(&ckpt),
        "--out",
        p(&out_dir),
        "--rotation",
        "1,0.2,0,0,1,0,0,0,1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("orthonormal"), "{stderr}");
    assert!(!out_dir.exists() || fs::read_dir(&out_dir).unwrap().next().is_none());
}

#[test]
fn stage_two_without_a_checkpoint_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "seed = 1\n").unwrap();
    let out = kpbe(&["train", "--stage", "2", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_flags_are_usage_errors() {
    let out = kpbe(&["evaluate", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    assert_eq!(kpbe(&["--help"]).status.code(), Some(0));
}

#[test]
fn enhance_and_reenact_write_one_frame_per_input() {
    let dir = tempfile::tempdir().unwrap();
    datagen(dir.path(), 3);
    let ckpt = quick_checkpoint(dir.path());
    let clip = dir.path().join("clips/clip_000");
    let backend = dir.path().join("backend/clip_000");
    let source = clip.join(frame_file_name(1));

    let enhanced = dir.path().join("enhanced");
    let out = kpbe(&[
        "enhance",
        "--source",
        p(&source),
        "--backend",
        p(&backend),
        "--pose-driver",
        p(&clip),
        "--ckpt",
        p(&ckpt),
        "--out",
        p(&enhanced),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_dir(&enhanced).unwrap().count(), 3);

    let novel = dir.path().join("novel");
    let out = kpbe(&[
        "reenact", "--source", p(&source), "--backend", p(&backend), "--ckpt", p(&ckpt), "--out", p(&novel),
        "--yaw", "-20", "--tx", "0.05",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_dir(&novel).unwrap().count(), 3);
}

#[test]
fn stage_two_resumes_from_stage_one() {
    let dir = tempfile::tempdir().unwrap();
    datagen(dir.path(), 2);
    let ckpt = quick_checkpoint(dir.path());
    let cfg = dir.path().join("stage2.cfg");
    fs::write(
        &cfg,
        format!(
            "train.batch_size = 1\ntrain.max_steps = 1\ntrain.log_every = 0\npaths.data = {}\npaths.backend = {}\n",
            p(&dir.path().join("clips")),
            p(&dir.path().join("backend"))
        ),
    )
    .unwrap();
    let tuned = dir.path().join("stage2.ckpt");
    let out = kpbe(&["train", "--stage", "2", "--config", p(&cfg), "--resume", p(&ckpt), "--out", p(&tuned)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let loaded = kpbe::training::Checkpoint::load(&tuned).unwrap();
    assert_eq!(loaded.optimizer.step, 1, "stage 2 runs on a fresh optimizer");
}
