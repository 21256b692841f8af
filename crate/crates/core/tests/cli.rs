mod common;

use std::process::Command;

use common::{config_path, msm, rate_and_configure_report, run_twice, BIN, EXPERIMENTS};

#[test]
fn experiments_are_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for sub in EXPERIMENTS {
        let (a, b) = run_twice(d, sub, &config_path(sub));
        assert!(!a.is_empty());
        assert_eq!(a, b, "{sub} report.json differs between runs");
    }
    let (config, session) = rate_and_configure_report(d, &d.join("pairs-a/sessions"));
    let (a, b) = run_twice(d, "report", &config);
    assert_eq!(a, b);
    let parsed: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(parsed["kappa"]["shared_pairs"], session.pairs.len());
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = config_path("sweep");
    msm(&["sweep", "--config", cfg.to_str().unwrap(), "--seed", "99", "--out", "o"], d);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("o/report.json")).unwrap()).unwrap();
    assert_eq!(report["provenance"]["seed"], 99);
}

#[test]
fn training_scoring_and_distortion_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    msm(&["phantom", "--count", "3", "--size", "32", "--seed", "40", "--out", "ph"], d);
    assert!(d.join("ph/phantom_42.png").exists());
    msm(&["distort", "--kind", "gaussian-noise", "--levels", "0,0.1", "--input", "ph/phantom_40.png", "--out", "lad"], d);
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("lad/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["levels"], serde_json::json!([0.0, 0.1]));
    let printed = msm(&["train-backbone", "--epochs", "1", "--count", "16", "--size", "32", "--loss", "l2", "--out", "bb"], d);
    assert!(printed.contains("backbone.ckpt"));
    msm(&["score", "--backbone", "bb/backbone.ckpt", "ph", "--measure", "L2", "--measure", "S_PSNR", "--out", "sc"], d);
    let rows = msm::harness::read_scores(d.join("sc/scores.csv")).unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[0].image_id, "phantom_40");
    msm(&["train-denoiser", "--arch", "dncnn", "--sigma", "0.1", "--epochs", "1", "--count", "16", "--size", "32", "--out", "dn"], d);
    let model = msm::denoise::DenoiserModel::load(d.join("dn/denoiser.ckpt")).unwrap();
    assert!(model.arch().is_learned());
}

#[test]
fn mismatched_or_missing_configs_fail() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let fails = |args: &[&str]| !Command::new(BIN).args(args).current_dir(d).output().unwrap().status.success();
    std::fs::write(d.join("c.json"), r#"{"kind": "sweep", "seed": 1}"#).unwrap();
    assert!(fails(&["correlate", "--config", "c.json"]));
    assert!(fails(&["report"]));
    std::fs::write(d.join("u.json"), r#"{"seed": 1, "surprise": true}"#).unwrap();
    assert!(fails(&["correlate", "--config", "u.json"]));
    assert!(fails(&["score", "--backbone", "missing.ckpt", "x.png"]));
}
