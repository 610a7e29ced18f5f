//! End-to-end runs of the `gfi` binary on the bundled toy network.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gfi_core::backend::toy;
use gfi_core::io::{load_mask, save_pixels, RunManifest};

fn gfi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gfi")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = gfi(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Three toy scenes plus a JSONL file with one box per scene.
fn fixture(dir: &Path) -> (Vec<PathBuf>, PathBuf) {
    let mut images = Vec::new();
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let name = format!("scene{seed}.png");
        save_pixels(&dir.join(&name), toy::scene(seed).pixels()).unwrap();
        images.push(dir.join(&name));
        lines.push(format!(
            r#"{{"image": "{name}", "objects": [{{"label": {}, "xmin": 1, "ymin": 1, "xmax": 5, "ymax": 5}}], "mask": "gt.png"}}"#,
            seed % 3
        ));
    }
    let mut gt = ndarray::Array3::zeros((1, 8, 8));
    gt.slice_mut(ndarray::s![.., 2..6, 2..6]).fill(1.0);
    save_pixels(&dir.join("gt.png"), &gt).unwrap();
    let ann = dir.join("ann.jsonl");
    std::fs::write(&ann, lines.join("\n")).unwrap();
    (images, ann)
}

#[test]
fn explain_writes_masks_overlays_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (images, _) = fixture(dir.path());
    let out = dir.path().join("out");
    ok(&["--arch", "toy", "--out-dir", s(&out), "--target-class", "1", "explain", s(dir.path())]);
    let manifest = RunManifest::load(&out.join("manifest.json")).unwrap();
    assert_eq!(manifest.inputs.len(), images.len() + 1, "gt.png is an image too");
    assert_eq!(manifest.arch, "toy");
    for item in &manifest.items {
        assert_eq!(item.target_class, 1);
        assert!(item.overlay.exists() && item.mask_png.exists());
        let m = load_mask(&item.mask).unwrap();
        assert_eq!(m.dim(), (8, 8));
        assert!(m.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("scene0.json")).unwrap()).unwrap();
    assert_eq!(sidecar["stage1_trace"].as_array().unwrap().len(), 10);
    assert_eq!(sidecar["stage2_trace"].as_array().unwrap().len(), 70);
}

#[test]
fn manifest_replay_reproduces_masks() {
    let dir = tempfile::tempdir().unwrap();
    let (images, _) = fixture(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["--arch", "toy", "--baseline", "gray", "--iters2", "15", "--out-dir", s(&a), "explain", s(&images[1])]);
    ok(&["--out-dir", s(&b), "explain", "--manifest", s(&a.join("manifest.json"))]);
    let replay = RunManifest::load(&b.join("manifest.json")).unwrap();
    assert_eq!(replay.interpret.stage2_iters, 15);
    assert_eq!(load_mask(&a.join("scene1.gfimask")).unwrap(), load_mask(&b.join("scene1.gfimask")).unwrap());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let (images, _) = fixture(dir.path());
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "arch = \"toy\"\niters1 = 3\niters2 = 4\ngamma = 2.5\n").unwrap();
    let out = dir.path().join("out");
    ok(&["--config", s(&cfg), "--iters2", "6", "--out-dir", s(&out), "explain", s(&images[0])]);
    let m = RunManifest::load(&out.join("manifest.json")).unwrap();
    assert_eq!((m.interpret.stage1_iters, m.interpret.stage2_iters, m.interpret.gamma), (3, 6, 2.5));

    std::fs::write(&cfg, "arch = \"toy\"\nstep_size = 3\n").unwrap();
    assert_eq!(gfi(&["--config", s(&cfg), "explain", s(&images[0])]).status.code(), Some(1));
}

#[test]
fn localization_sweep_writes_21_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ann) = fixture(dir.path());
    let out = dir.path().join("out");
    let stdout = ok(&[
        "--arch",
        "toy",
        "--iters2",
        "5",
        "--out-dir",
        s(&out),
        "eval-localization",
        "--annotations",
        s(&ann),
        "--sweep",
    ]);
    assert!(stdout.contains("localization error"));
    let csv = std::fs::read_to_string(out.join("localization_sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "alpha,error,n_images,n_skipped");
    assert_eq!(lines.len(), 22);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("localization_report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 3);
    assert_eq!(report["summary"]["n_images"], 3.0);

    // cached masks are reused
    ok(&[
        "--arch",
        "toy",
        "--out-dir",
        s(&out),
        "eval-localization",
        "--annotations",
        s(&ann),
        "--resume",
        "--alpha",
        "1.5",
    ]);
}

#[test]
fn pointing_game_reports_center_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ann) = fixture(dir.path());
    let out = dir.path().join("out");
    ok(&["--arch", "toy", "--out-dir", s(&out), "pointing-game", "--annotations", s(&ann), "--method", "grad"]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("pointing_report.json")).unwrap()).unwrap();
    // center of 8x8 is (4, 4), inside every 1..=5 box
    assert_eq!(report["center"]["mean_accuracy"], 1.0);
    assert_eq!(report["rows"].as_array().unwrap().len(), 3);
}

#[test]
fn saliency_detection_accepts_mask_only_records() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let ann = dir.path().join("sod.jsonl");
    std::fs::write(
        &ann,
        "{\"image\": \"scene0.png\", \"mask\": \"gt.png\"}\n{\"image\": \"scene2.png\", \"mask\": \"gt.png\"}\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    ok(&["--arch", "toy", "--out-dir", s(&out), "saliency-detect", "--annotations", s(&ann), "--method", "grad"]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("saliency_report.json")).unwrap()).unwrap();
    for key in ["precision", "recall", "f_beta", "mae"] {
        let v = report["summary"][key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
}

#[test]
fn fgsm_and_gradient_commands_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (images, ann) = fixture(dir.path());
    let out = dir.path().join("out");
    ok(&[
        "--arch",
        "toy",
        "--iters2",
        "5",
        "--out-dir",
        s(&out),
        "fgsm-demo",
        "--annotations",
        s(&ann),
        "--epsilon",
        "0.1",
    ]);
    assert!(out.join("scene0_adv.png").exists() && out.join("scene0_adv.gfimask").exists());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("fgsm_report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 3);
    assert_eq!(report["epsilon"], 0.1);

    ok(&["--arch", "toy", "--out-dir", s(&out), "grad-baseline", s(&images[2])]);
    assert_eq!(load_mask(&out.join("scene2_grad.gfimask")).unwrap().dim(), (8, 8));
}

#[test]
fn user_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let (images, _) = fixture(dir.path());
    let img = s(&images[0]);
    let scratch = dir.path().join("out");
    let gfi = |args: &[&str]| gfi(&[&["--out-dir", s(&scratch)], args].concat());
    let out = gfi(&["--arch", "lenet", "explain", img]);
    assert_eq!(out.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("vgg19") && msg.contains("resnet18") && msg.contains("alexnet"), "{msg}");

    let missing = dir.path().join("nope.png");
    assert_eq!(gfi(&["--arch", "toy", "explain", s(&missing)]).status.code(), Some(1));
    assert_eq!(gfi(&["--arch", "toy", "--lr", "-1", "explain", img]).status.code(), Some(1));
    assert_eq!(gfi(&["--arch", "toy", "--baseline", "plasma", "explain", img]).status.code(), Some(1));
    assert_eq!(gfi(&["--arch", "toy", "--target-class", "7", "explain", img]).status.code(), Some(1));
    assert_eq!(gfi(&["--arch", "vgg19", "--weights", s(&missing), "explain", img]).status.code(), Some(1));
    assert_eq!(gfi(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(gfi(&["--help"]).status.code(), Some(0));
}
