//! CLI behaviour: flag validation, exit codes, output determinism.

use std::path::Path;
use std::process::Command;

fn thzq() -> Command {
    Command::new(env!("CARGO_BIN_EXE_thzq"))
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn params_prints_the_exact_budget_line() {
    let out = thzq().args(["params", "--model", "qml-dnn"]).output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.trim(), "vqc=28 head=26101 total=26129");
}

#[test]
fn zero_epochs_is_a_usage_error() {
    let out = thzq()
        .args([
            "train", "--model", "dnn", "--data", "x.thzd", "--out", "x.json", "--epochs", "0",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn unknown_flags_are_rejected() {
    let out = thzq()
        .args(["synth", "--seed", "1", "--out", "x.thzd", "--frobnicate"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_decay_is_a_usage_error() {
    let out = thzq()
        .args([
            "train", "--model", "dnn", "--data", "x", "--out", "y", "--decay", "1.5",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_dataset_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = thzq()
        .args([
            "eval",
            "--ckpt",
            dir.path().join("nope.json").to_str().unwrap(),
            "--data",
            dir.path().join("nope.thzd").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}

#[test]
fn synth_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.thzd");
    let b = dir.path().join("b.thzd");
    for out in [&a, &b] {
        let result = thzq()
            .args(["synth", "--seed", "7", "--out", out.to_str().unwrap()])
            .output()
            .unwrap();
        assert!(result.status.success());
    }
    assert_eq!(read(&a), read(&b));
}

#[test]
fn synth_accepts_scene_and_config_overrides() {
    let dir = tempfile::tempdir().unwrap();
    // a 4x4 grid with 3 scans per side keeps this fast
    let config = r#"{"pixels_per_side": 4, "scans_per_pixel_side": 3}"#;
    let config_path = dir.path().join("cfg.json");
    std::fs::write(&config_path, config).unwrap();

    let mut scene = String::new();
    for s in 0..6 {
        if s > 0 {
            scene.push('\n');
        }
        for row in 0..4 {
            for col in 0..4 {
                scene.push(if (row + col + s) % 2 == 0 { '1' } else { '0' });
            }
            scene.push('\n');
        }
    }
    let scene_path = dir.path().join("scene.txt");
    std::fs::write(&scene_path, &scene).unwrap();

    let data = dir.path().join("d.thzd");
    let out = thzq()
        .args([
            "synth",
            "--seed",
            "3",
            "--out",
            data.to_str().unwrap(),
            "--config",
            config_path.to_str().unwrap(),
            "--scene",
            scene_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("144 samples"));
}

#[test]
fn gradcheck_exits_zero_and_reports() {
    let out = thzq().args(["gradcheck", "--seed", "5"]).output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("gradcheck: PASS"), "{stdout}");
}

#[test]
fn every_run_prints_the_resolved_config() {
    let out = thzq().args(["params", "--model", "dnn"]).output().unwrap();
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("config: params model=dnn"));
}

#[test]
fn threads_fall_back_to_the_environment() {
    let out = thzq()
        .env("THZQ_THREADS", "3")
        .args(["params", "--model", "logreg"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("threads=3"), "{stderr}");

    // an explicit flag wins over the environment
    let out = thzq()
        .env("THZQ_THREADS", "3")
        .args(["--threads", "2", "params", "--model", "logreg"])
        .output()
        .unwrap();
    assert!(String::from_utf8(out.stderr).unwrap().contains("threads=2"));
}
