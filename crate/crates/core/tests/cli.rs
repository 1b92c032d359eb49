//! Black-box checks of the `crkit` binary: exit codes, metadata echoes, and
//! file-level behavior not already covered by the acceptance gate.

use std::path::Path;
use std::process::{Command, Output};

use crkit::crselector::CRSelectorParams;
use crkit::rng::RngState;
use crkit::{io, Conv1x1Params, Shape, Tensor};

fn crkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crkit"))
        .args(args)
        .output()
        .expect("spawn crkit")
}

fn gen_fixtures(dir: &Path) {
    let out = crkit(&["gen-fixtures", "--seed", "5", "--out-dir", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn bad_tensor_magic_exits_1_with_path() {
    let dir = tempfile::tempdir().unwrap();
    gen_fixtures(dir.path());
    let bad = dir.path().join("bad.crt1");
    std::fs::write(&bad, b"oops").unwrap();
    let out = crkit(&[
        "crselector",
        "--features",
        bad.to_str().unwrap(),
        "--image",
        dir.path().join("image.crt1").to_str().unwrap(),
        "--params",
        dir.path().join("params.crp1").to_str().unwrap(),
        "--out-dir",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}

#[test]
fn zero_out_conv_reproduces_input_payload() {
    let dir = tempfile::tempdir().unwrap();
    gen_fixtures(dir.path());
    let mut p = CRSelectorParams::<f32>::seeded(4, 1, 4, &RngState::new(5));
    p.out_conv = Conv1x1Params::zeros(4, 4);
    let params = dir.path().join("zero.crp1");
    io::save_crselector_params(&params, &p, 5).unwrap();
    let out = crkit(&[
        "crselector",
        "--features",
        dir.path().join("feature.crt1").to_str().unwrap(),
        "--image",
        dir.path().join("image.crt1").to_str().unwrap(),
        "--params",
        params.to_str().unwrap(),
        "--out-dir",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let input = std::fs::read(dir.path().join("feature.crt1")).unwrap();
    let output = std::fs::read(dir.path().join("out/output.crt1")).unwrap();
    assert_eq!(input, output);
    let meta = std::fs::read_to_string(dir.path().join("out/meta.txt")).unwrap();
    assert!(meta.contains("seed=5"));
}

#[test]
fn eval_parse_error_reports_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let dets = dir.path().join("dets.txt");
    let gts = dir.path().join("gts.txt");
    std::fs::write(&dets, "0 0 0 0 10 10 0.9\n0 0 nonsense 0 10 10 0.5\n").unwrap();
    std::fs::write(&gts, "0 0 0 0 10 10\n").unwrap();
    let out = crkit(&[
        "eval",
        "--dets",
        dets.to_str().unwrap(),
        "--gts",
        gts.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2"), "stderr: {err}");
}

#[test]
fn eval_perfect_predictions_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let dets = dir.path().join("dets.txt");
    let gts = dir.path().join("gts.txt");
    std::fs::write(&dets, "0 0 10 10 50 50 0.9\n1 0 0 0 200 200 0.8\n").unwrap();
    std::fs::write(&gts, "0 0 10 10 50 50\n1 0 0 0 200 200\n").unwrap();
    let out = crkit(&[
        "eval",
        "--dets",
        dets.to_str().unwrap(),
        "--gts",
        gts.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("map=1.0000"), "{text}");
    assert!(text.contains("map50=1.0000"), "{text}");
}

#[test]
fn gradcheck_zero_threshold_fails_with_exit_2() {
    let out = crkit(&["gradcheck", "--module", "sca-head", "--threshold", "0"]);
    assert_eq!(out.status.code(), Some(2));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("pass=false"));
    // Report line count matches the declared check count.
    let lines: Vec<&str> = text.lines().collect();
    let summary = lines.last().unwrap();
    let checked: usize = summary
        .split_whitespace()
        .find_map(|f| f.strip_prefix("checked="))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(lines.len() - 1, checked);
}

#[test]
fn sca_single_level_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    gen_fixtures(dir.path());
    let out = crkit(&[
        "sca",
        "--params",
        dir.path().join("sca.sca1").to_str().unwrap(),
        "--out-dir",
        dir.path().join("out").to_str().unwrap(),
        dir.path().join("level1.crt1").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let meta = String::from_utf8(out.stdout).unwrap();
    assert!(meta.contains("levels=1"));
    assert!(meta.contains("seed=42"));
    let input = io::load_tensor(&dir.path().join("level1.crt1")).unwrap();
    let output = io::load_tensor(&dir.path().join("out/level0_out.crt1")).unwrap();
    assert_eq!(input.shape(), output.shape());
    // Gating scales each level by a single per-batch factor in [1, 2].
    let ratio = output.data()[0] / input.data()[0];
    assert!((1.0..=2.0).contains(&ratio));
    for (a, b) in input.data().iter().zip(output.data()) {
        assert!((b - a * ratio).abs() < 1e-5);
    }
}

#[test]
fn manifest_foreground_fraction_matches_image() {
    let dir = tempfile::tempdir().unwrap();
    gen_fixtures(dir.path());
    let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    let declared: f64 = manifest
        .lines()
        .find(|l| l.starts_with("image.crt1"))
        .and_then(|l| l.split_whitespace().find_map(|f| f.strip_prefix("foreground_fraction=")))
        .unwrap()
        .parse()
        .unwrap();
    let img: Tensor = io::load_tensor(&dir.path().join("image.crt1")).unwrap();
    let bright = img.data().iter().filter(|&&v| v > 0.5).count();
    let actual = bright as f64 / img.shape().len() as f64;
    assert!((declared - actual).abs() <= 0.01, "declared {declared}, actual {actual}");
    assert_eq!(img.shape(), Shape::new(1, 1, 32, 32));
}

#[test]
fn soft_mask_and_tau_flags_are_respected() {
    let dir = tempfile::tempdir().unwrap();
    gen_fixtures(dir.path());
    let out = crkit(&[
        "crselector",
        "--features",
        dir.path().join("feature.crt1").to_str().unwrap(),
        "--image",
        dir.path().join("image.crt1").to_str().unwrap(),
        "--params",
        dir.path().join("params.crp1").to_str().unwrap(),
        "--out-dir",
        dir.path().join("out").to_str().unwrap(),
        "--soft-mask",
        "--tau",
        "0.5",
        "--seed",
        "7",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let meta = String::from_utf8(out.stdout).unwrap();
    assert!(meta.contains("mask=soft"));
    assert!(meta.contains("tau=0.5"));
    assert!(meta.contains("seed=7"));
    // Soft masks are fractional: the keymask grid is not all 0/1.
    let mask = std::fs::read_to_string(dir.path().join("out/keymask.txt")).unwrap();
    let fractional = mask
        .split_whitespace()
        .filter_map(|t| t.parse::<f64>().ok())
        .any(|v| v > 0.0 && v < 1.0);
    assert!(fractional, "{mask}");
}
