use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn panonerf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_panonerf"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = panonerf(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Asserts a single `error kind=...` line on stderr and returns it.
fn fails(dir: &Path, args: &[&str], code: i32, kind: &str) -> String {
    let out = panonerf(dir, args);
    assert_eq!(out.status.code(), Some(code), "{args:?}");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("error kind={kind} message=\"")), "{err}");
    err
}

fn synth(dir: &Path) {
    ok(dir, &["synth", "--out", "in", "--width", "32", "--height", "16"]);
}

#[test]
fn synth_writes_rgbd_and_scene() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path());
    for f in ["rgb.png", "depth.pfm", "scene.toml"] {
        assert!(tmp.path().join("in").join(f).is_file(), "{f}");
    }
    ok(tmp.path(), &["synth", "--out", "png", "--depth-format", "png16", "--width", "16", "--height", "8"]);
    assert!(tmp.path().join("png/depth.png").is_file());
}

#[test]
fn synth_reads_a_scene_file() {
    let tmp = TempDir::new().unwrap();
    std::fs::write(tmp.path().join("s.toml"), "half_extents = [2.0, 2.0, 2.0]\n").unwrap();
    ok(tmp.path(), &["synth", "--out", "a", "--scene", "s.toml", "--width", "16", "--height", "8"]);
    std::fs::write(tmp.path().join("bad.toml"), "radius = 2.0\n").unwrap();
    fails(tmp.path(), &["synth", "--out", "b", "--scene", "bad.toml"], 1, "config");
}

#[test]
fn reproject_to_zero_offset_copies_the_input() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path());
    ok(
        tmp.path(),
        &["reproject", "--rgb", "in/rgb.png", "--depth", "in/depth.pfm", "--offset", "0,0,0", "--offset", "0.1,0,0", "--out", "fr"],
    );
    let index = std::fs::read_to_string(tmp.path().join("fr/poses.csv")).unwrap();
    assert_eq!(index.lines().count(), 3);
    assert!(index.lines().nth(1).unwrap().ends_with(",1.000000"));
    let a = std::fs::read(tmp.path().join("in/rgb.png")).unwrap();
    let b = std::fs::read(tmp.path().join("fr/frame_000/rgb.png")).unwrap();
    assert_eq!(a, b);
    assert!(tmp.path().join("fr/frame_001/mask.png").is_file());
}

#[test]
fn train_render_eval_round_trip() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth(d);
    ok(d, &["reproject", "--rgb", "in/rgb.png", "--depth", "in/depth.pfm", "--count", "2", "--out", "fr"]);
    let out = ok(
        d,
        &[
            "train",
            "--input.rgb",
            "in/rgb.png",
            "--input.depth",
            "in/depth.pfm",
            "--train.iters",
            "4",
            "--train.batch_rays",
            "32",
            "--train.n_coarse",
            "8",
            "--train.n_fine",
            "8",
            "--train.semantic.width",
            "16",
            "--train.semantic.height",
            "8",
            "--train.semantic.n_coarse",
            "4",
            "--train.losses.k_sc",
            "2",
            "--output.dir",
            "run",
        ],
    );
    assert!(out.contains("iter=4"), "{out}");
    let run = d.join("run");
    for f in ["config.toml", "metrics.csv", "final.ckpt", "ckpt_0000004.ckpt"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 5);
    let resolved = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(resolved.contains("iters = 4"), "{resolved}");

    // Re-running from the resolved config reproduces the checkpoint.
    ok(d, &["train", "--config", "run/config.toml", "--output.dir", "again"]);
    assert_eq!(
        std::fs::read(run.join("final.ckpt")).unwrap(),
        std::fs::read(d.join("again/final.ckpt")).unwrap()
    );

    ok(d, &["render", "--checkpoint", "run/final.ckpt", "--width", "16", "--height", "8", "--out-rgb", "v.png", "--out-depth", "v.pfm"]);
    assert!(d.join("v.png").is_file() && d.join("v.pfm").is_file());

    let table = ok(d, &["eval", "--checkpoint", "run/final.ckpt", "--frames", "fr", "--out", "rep.csv", "--n-coarse", "8", "--n-fine", "8"]);
    assert!(table.contains("frame_001"), "{table}");
    let report = std::fs::read_to_string(d.join("rep.csv")).unwrap();
    assert!(report.starts_with("view,x,y,z,psnr,ssim,depth_mae,valid_fraction,lpips"));
    assert_eq!(report.lines().count(), 3);

    let single = ok(d, &["eval", "--checkpoint", "run/final.ckpt", "--rgb", "in/rgb.png", "--depth", "in/depth.pfm", "--renders", "rend"]);
    assert!(single.contains("input"));
    assert!(d.join("rend/input_rgb.png").is_file());
}

#[test]
fn train_resumes_from_a_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth(d);
    let common = [
        "--input.rgb",
        "in/rgb.png",
        "--input.depth",
        "in/depth.pfm",
        "--train.iters",
        "4",
        "--train.checkpoint_every",
        "2",
        "--train.batch_rays",
        "16",
        "--train.n_coarse",
        "4",
        "--train.n_fine",
        "4",
        "--train.losses.lambda_sc",
        "0",
    ];
    let mut full = vec!["train"];
    full.extend(common);
    full.extend(["--output.dir", "full"]);
    ok(d, &full);
    let mut resumed = vec!["train"];
    resumed.extend(common);
    resumed.extend(["--output.dir", "resumed", "--resume", "full/ckpt_0000002.ckpt"]);
    ok(d, &resumed);
    assert_eq!(
        std::fs::read(d.join("full/final.ckpt")).unwrap(),
        std::fs::read(d.join("resumed/final.ckpt")).unwrap()
    );
}

#[test]
fn errors_are_one_line_with_nonzero_exit() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    fails(d, &[], 2, "usage");
    fails(d, &["train", "--no-such-flag", "1"], 2, "usage");
    fails(d, &["render", "--checkpoint", "missing.ckpt", "--out-rgb", "x.png"], 1, "io");
    fails(d, &["train", "--train.iters", "lots"], 1, "config");
    fails(d, &["train", "--train.lr_end", "1.0"], 1, "config");
    fails(d, &["train", "--input.rgb", "nowhere.png"], 1, "config");
    std::fs::write(d.join("bad.toml"), "[train\n").unwrap();
    fails(d, &["train", "--config", "bad.toml"], 1, "config");
    std::fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    fails(d, &["render", "--checkpoint", "junk.ckpt", "--out-rgb", "x.png"], 1, "format");
    synth(d);
    fails(d, &["reproject", "--rgb", "in/rgb.png", "--depth", "in/depth.pfm", "--offset", "1,2", "--out", "o"], 2, "usage");
    fails(d, &["eval", "--checkpoint", "junk.ckpt"], 1, "format");
}

#[test]
fn every_config_key_is_a_train_flag() {
    let tmp = TempDir::new().unwrap();
    let help = ok(tmp.path(), &["train", "--help"]);
    for key in ["--train.iters", "--train.losses.lambda_geo", "--train.arch.width", "--input.mask", "--output.depth_format", "--train.seeds.jitter"] {
        assert!(help.contains(key), "{key}");
    }
}
