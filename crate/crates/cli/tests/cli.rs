use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use awmfuse::imagecore::{load_image, save_gray, ImageGray};
use awmfuse::Tensor;

fn awmfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_awmfuse")).args(args).env_remove("AWMFUSE_CACHE_DIR").output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Scenes, a degraded dataset and a toy config under `root`.
fn dataset(root: &Path) -> PathBuf {
    let clean = root.join("clean");
    let data = root.join("data");
    let o = awmfuse(&["scenes", "--out-dir", s(&clean), "--count", "2", "--size", "16", "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = awmfuse(&["degrade", "--clean-dir", s(&clean), "--out-dir", s(&data), "--per-type", "1", "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    std::fs::write(root.join("toy.toml"), "preset = \"toy\"\ncrop = 16\nepochs = 1\n").unwrap();
    data
}

fn train(root: &Path, extra: &[&str]) -> (Output, PathBuf) {
    let ckpt = root.join("model.ckpt");
    let manifest = root.join("data/manifest.json");
    let config = root.join("toy.toml");
    let mut args = vec!["train", "--manifest", s(&manifest), "--config", s(&config), "--out-checkpoint", s(&ckpt)];
    args.extend_from_slice(extra);
    (awmfuse(&args), ckpt)
}

fn detail_tokens(out: &str) -> f64 {
    let line = out.lines().find(|l| l.starts_with("tokens:")).unwrap();
    line.rsplit(' ').next().unwrap().parse().unwrap()
}

#[test]
fn degrade_writes_one_pair_per_weather_type() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    assert_eq!(std::fs::read_dir(data.join("vi")).unwrap().count(), 3);
    assert!(data.join("manifest.json").is_file());
}

#[test]
fn degrade_of_missing_dir_fails_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = dir.path().join("out");
    let o = awmfuse(&["degrade", "--clean-dir", s(&missing), "--out-dir", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("error:"));
}

#[test]
fn train_writes_checkpoint_and_loss_csv() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let (o, ckpt) = train(dir.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(ckpt.is_file());
    let csv = std::fs::read_to_string(dir.path().join("model.loss.csv")).unwrap();
    assert!(csv.starts_with("epoch,vlm,color,l1,ssim,total\n"));
    assert_eq!(csv.lines().count(), 2);
    assert!(stdout(&o).contains("tokens: caption"));
}

#[test]
fn reduced_text_halves_logged_detail_tokens() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let (clean, _) = train(dir.path(), &["--max-steps", "1"]);
    let (reduced, _) = train(dir.path(), &["--max-steps", "1", "--text-mode", "reduced"]);
    assert!(reduced.status.success(), "{}", stderr(&reduced));
    let (c, r) = (detail_tokens(&stdout(&clean)), detail_tokens(&stdout(&reduced)));
    assert!(r <= c / 2.0 + 1.0 && r < c, "{c} vs {r}");
}

#[test]
fn usage_errors_exit_64() {
    let dir = tempfile::tempdir().unwrap();
    let (o, _) = train(dir.path(), &["--text-mode", "noisy", "--text-mode", "reduced"]);
    assert_eq!(o.status.code(), Some(64), "{}", stderr(&o));
    let (o, _) = train(dir.path(), &["--bogus"]);
    assert_eq!(o.status.code(), Some(64));
    let (o, _) = train(dir.path(), &["--text-mode", "loud"]);
    assert_eq!(o.status.code(), Some(64));
    assert_eq!(awmfuse(&["--help"]).status.code(), Some(0));
}

#[test]
fn fuse_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    dataset(root);
    let (o, ckpt) = train(root, &["--max-steps", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let vi = root.join("data/vi/rain_0000.png");
    let ir = root.join("data/ir/rain_0000.png");
    let text = root.join("data/text/rain_0000.json");
    let out = root.join("fused.png");

    let o = awmfuse(&["fuse", "--checkpoint", s(&ckpt), "--vi", s(&vi), "--ir", s(&ir), "--sidecar", s(&text), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(load_image(&out).unwrap().dims(), load_image(&vi).unwrap().dims());

    let small = root.join("small.png");
    save_gray(&ImageGray::new(Tensor::zeros(&[1, 8, 8])).unwrap(), &small).unwrap();
    let o = awmfuse(&["fuse", "--checkpoint", s(&ckpt), "--vi", s(&vi), "--ir", s(&small), "--sidecar", s(&text), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = awmfuse(&["fuse", "--checkpoint", s(&ckpt), "--vi", s(&vi), "--ir", s(&ir), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn evaluate_csv_shape_and_empty_input() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let clean = root.join("clean");
    awmfuse(&["scenes", "--out-dir", s(&clean), "--count", "1", "--size", "16"]);
    let fused = root.join("fused");
    std::fs::create_dir(&fused).unwrap();
    std::fs::copy(clean.join("vi/scene_0000.png"), fused.join("scene_0000.png")).unwrap();
    let (vi, ir) = (clean.join("vi"), clean.join("ir"));
    let csv = root.join("m.csv");
    let o = awmfuse(&["evaluate", "--fused-dir", s(&fused), "--vi-dir", s(&vi), "--ir-dir", s(&ir), "--out-csv", s(&csv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let first = std::fs::read(&csv).unwrap();
    let text = String::from_utf8(first.clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("id,") && lines[1].starts_with("scene_0000,") && lines[2].starts_with("mean,"));
    awmfuse(&["evaluate", "--fused-dir", s(&fused), "--vi-dir", s(&vi), "--ir-dir", s(&ir), "--out-csv", s(&csv)]);
    assert_eq!(std::fs::read(&csv).unwrap(), first);

    let empty = root.join("empty");
    std::fs::create_dir(&empty).unwrap();
    let o = awmfuse(&["evaluate", "--fused-dir", s(&empty), "--vi-dir", s(&vi), "--ir-dir", s(&ir), "--out-csv", s(&csv)]);
    assert_ne!(o.status.code(), Some(0));
}
