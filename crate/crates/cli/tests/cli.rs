use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use s3po::datakit::{read_frames, write_synthetic_source, SyntheticKind};

fn s3po(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_s3po"))
        .args(args)
        .env_remove("S3PO_DATA_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = s3po(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Prepared, split and degraded dataset of three 24×32 clips.
fn dataset(dir: &Path) -> std::path::PathBuf {
    let src = dir.join("src");
    let root = dir.join("data");
    write_synthetic_source(&src, SyntheticKind::Panoramic, 3, 4, 24, 32, 5).unwrap();
    ok(&["prepare", "--input", p(&src), "--output", p(&root), "--width", "32", "--height", "24"]);
    ok(&["--seed", "3", "split", "--root", p(&root), "--test-count", "1"]);
    ok(&["degrade", "--root", p(&root), "--mode", "bd", "--scale", "4"]);
    root
}

fn train_tiny(root: &Path, out: &Path) {
    ok(&[
        "--seed", "1", "train", "--root", p(root), "--out", p(out), "--channels", "4", "--blocks", "1",
        "--epochs", "1", "--lr", "1e-3",
    ]);
}

#[test]
fn full_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dataset(dir.path());
    let ckpt = dir.path().join("ckpt");
    train_tiny(&root, &ckpt);
    assert!(ckpt.join("weights.bin").is_file());
    let log = fs::read_to_string(ckpt.join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,clip_id,loss,lr"));
    assert_eq!(log.lines().count(), 3);

    let pred = dir.path().join("pred");
    ok(&["infer", "--checkpoint", p(&ckpt), "--input", p(&root), "--output", p(&pred)]);
    let clips: Vec<_> = fs::read_dir(&pred).unwrap().collect();
    assert_eq!(clips.len(), 1);
    let clip = clips[0].as_ref().unwrap().path();
    let frames = read_frames(&clip, None).unwrap();
    assert_eq!(frames.len(), 4);
    assert_eq!((frames[0].height(), frames[0].width()), (24, 32));

    let eval = dir.path().join("eval");
    let out = ok(&[
        "evaluate", "--gt", p(&root), "--pred", p(&pred), "--out", p(&eval), "--baseline", "bd",
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("s3po:") && stdout.contains("bicubic:"));
    let csv = fs::read_to_string(eval.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "model,clip_id,frame_index,psnr,ssim,ws_psnr,ws_ssim");
    assert_eq!(csv.lines().count(), 1 + 2 * 4);

    let rep = dir.path().join("report");
    ok(&["report", "--bundle", p(&eval.join("bundle.json")), "--out", p(&rep)]);
    let md = fs::read_to_string(rep.join("report.md")).unwrap();
    assert!(md.contains("| s3po |") && md.contains("| bicubic |"));
    for m in ["psnr", "ssim", "ws_psnr", "ws_ssim"] {
        assert!(rep.join(format!("plot_{m}.svg")).is_file());
    }
}

#[test]
fn evaluate_identical_clips_gives_sentinels_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let root = dataset(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&["evaluate", "--gt", p(&root), "--pred", p(&root), "--out", p(out), "--split", "train"]);
    }
    let csv = fs::read_to_string(a.join("metrics.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(&cols[3..], &["inf", "1", "inf", "1"]);
    }
    for f in ["metrics.csv", "bundle.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
}

#[test]
fn infer_is_deterministic_and_cyclic_flag_changes_output() {
    let dir = tempfile::tempdir().unwrap();
    let root = dataset(dir.path());
    let ckpt = dir.path().join("ckpt");
    train_tiny(&root, &ckpt);
    let run = |name: &str, cyclic: bool| {
        let out = dir.path().join(name);
        let mut args = vec!["infer", "--checkpoint", p(&ckpt), "--input", p(&root), "--output", p(&out)];
        if cyclic {
            args.push("--cyclic");
        }
        ok(&args);
        let clip = fs::read_dir(&out).unwrap().next().unwrap().unwrap().path();
        fs::read(clip.join("frame_00002.png")).unwrap()
    };
    let plain = run("plain", false);
    assert_eq!(plain, run("plain2", false));
    assert_ne!(plain, run("cyclic", true));
}

#[test]
fn missing_checkpoint_leaves_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let root = dataset(dir.path());
    let out_dir = dir.path().join("never");
    let out = s3po(&[
        "infer", "--checkpoint", p(&dir.path().join("nope")), "--input", p(&root), "--output", p(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!out_dir.exists());
}

#[test]
fn checkpoint_config_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let root = dataset(dir.path());
    let ckpt = dir.path().join("ckpt");
    train_tiny(&root, &ckpt);
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"model": {"base_channels": 8, "num_blocks": 1}}"#).unwrap();
    let out = s3po(&[
        "--config", p(&cfg), "train", "--root", p(&root), "--out", p(&dir.path().join("c2")),
        "--init", p(&ckpt), "--epochs", "1",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("extract.joint_prev.weight"));
}

#[test]
fn exit_codes() {
    assert_eq!(s3po(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(s3po(&["report"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let out = s3po(&["prepare", "--input", p(&empty), "--output", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3));

    let bundle = dir.path().join("bundle.json");
    fs::write(
        &bundle,
        r#"{"reports": [], "baseline_reports": null, "table_paths": [], "plot_paths": [], "config_echo": null}"#,
    )
    .unwrap();
    let out = s3po(&["report", "--bundle", p(&bundle), "--out", p(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn diverging_training_exits_with_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("ckpt");
    let out = s3po(&[
        "train", "--synthetic", "2", "--synthetic-frames", "2", "--synthetic-size", "6x8", "--out",
        p(&out_dir), "--channels", "4", "--blocks", "1", "--epochs", "3", "--lr", "1e300",
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("diagnostic").join("weights.bin").is_file());
}

#[test]
fn data_root_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let root = dataset(dir.path());
    let out = Command::new(env!("CARGO_BIN_EXE_s3po"))
        .args(["--seed", "9", "split", "--test-count", "2"])
        .env("S3PO_DATA_ROOT", &root)
        .output()
        .unwrap();
    assert!(out.status.success());
    let m = s3po::datakit::DatasetManifest::load(&root).unwrap();
    assert_eq!((m.train_count, m.test_count), (1, 2));
    assert_eq!(fs::read_dir(root.join("test")).unwrap().count(), 2);
}

#[test]
fn siti_reports_every_clip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dataset(dir.path());
    let out = ok(&["siti", "--input", p(&root)]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v.as_object().unwrap().len(), 3);
    let m = s3po::datakit::DatasetManifest::load(&root).unwrap();
    for e in &m.entries {
        assert_eq!(v[&e.clip_id]["si"].as_f64().unwrap(), e.si);
    }
}
