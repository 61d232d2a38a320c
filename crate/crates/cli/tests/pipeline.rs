use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn perfrecon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_perfrecon"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = perfrecon(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Fast reconstruction settings for the end-to-end runs.
const QUICK: &str = r#"{"recon": {"max_iters": 4}}"#;

fn run_pipeline(root: &Path, threads: &str) {
    let ph = root.join("phantom");
    let smp = root.join("sample");
    let cfg = root.join("config.json");
    std::fs::write(&cfg, QUICK).unwrap();
    ok(&["--threads", threads, "phantom", "--mode", "dsc", "--out", p(&ph)]);
    ok(&[
        "sample", "--in", p(&ph.join("truth.pvol")), "--scheme", "radial", "--R", "4", "--seed", "3",
        "--out", p(&smp),
    ]);
    ok(&[
        "--threads", threads, "recon", "--in", p(&smp.join("kspace.pvol")), "--mask", p(&smp.join("mask.pvol")),
        "--method", "proposed", "--config", p(&cfg), "--truth", p(&smp.join("normalized.pvol")),
        "--out", p(&root.join("recon")),
    ]);
    ok(&[
        "quantify", "--in", p(&ph.join("truth.pvol")), "--mode", "dsc", "--aif", p(&ph.join("aif.csv")),
        "--out", p(&root.join("reference")),
    ]);
    ok(&[
        "--threads", threads, "quantify", "--in", p(&root.join("recon/recon.pvol")), "--mode", "dsc",
        "--aif", p(&ph.join("aif.csv")), "--norm", p(&smp.join("normalization.json")),
        "--reference", p(&root.join("reference")), "--out", p(&root.join("maps")),
    ]);
    ok(&["report", "--run", p(root)]);
}

#[test]
fn unknown_flag_fails_with_usage() {
    let out = perfrecon(&["recon", "--definitely-not-a-flag"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_input_is_a_one_line_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = perfrecon(&[
        "sample", "--in", p(&dir.path().join("absent.pvol")), "--out", p(&dir.path().join("o")),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
}

#[test]
fn zero_filled_full_mask_is_lossless_to_single_precision() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(&["phantom", "--mode", "dsc", "--out", p(&root.join("ph"))]);
    ok(&[
        "sample", "--in", p(&root.join("ph/truth.pvol")), "--scheme", "cartesian", "--R", "1", "--sigma2", "0",
        "--out", p(&root.join("s")),
    ]);
    ok(&[
        "recon", "--in", p(&root.join("s/kspace.pvol")), "--mask", p(&root.join("s/mask.pvol")),
        "--method", "zerofill", "--truth", p(&root.join("s/normalized.pvol")), "--out", p(&root.join("r")),
    ]);
    ok(&["report", "--run", p(root)]);
    let summary = json(&root.join("summary.json"));
    assert!(summary["psnr"].as_f64().unwrap() > 120.0, "{}", summary["psnr"]);
    assert!(summary["rmse"].as_f64().unwrap() < 1e-6);

    ok(&[
        "recon", "--in", p(&root.join("s/kspace.pvol")), "--mask", p(&root.join("s/mask.pvol")),
        "--method", "zerofill", "--truth", p(&root.join("r/recon.pvol")), "--out", p(&root.join("again")),
    ]);
    std::fs::remove_dir_all(root.join("r")).unwrap();
    ok(&["report", "--run", p(root)]);
    let summary = json(&root.join("summary.json"));
    assert_eq!(summary["psnr"], "inf");
    assert_eq!(summary["rmse"], 0.0);
}

#[test]
fn pipeline_summary_has_expected_keys() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(dir.path(), "2");
    let summary = json(&dir.path().join("summary.json"));
    for key in ["psnr", "ccc_cbf", "ccc_cbv", "ccc_mtt"] {
        assert!(summary[key].is_number(), "{key}: {}", summary[key]);
    }
    for f in ["recon/resolved_config.json", "recon/history.csv", "maps/cbf.pgm", "maps/bland_altman_cbf.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn pipeline_is_deterministic_across_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(a.path(), "1");
    run_pipeline(b.path(), "4");
    for f in [
        "phantom/truth.pvol",
        "sample/kspace.pvol",
        "sample/ref.pvol",
        "recon/recon.pvol",
        "recon/history.csv",
        "maps/cbf.pvol",
        "maps/cbv.pvol",
        "maps/mtt.pvol",
        "maps/metrics.json",
    ] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
}

#[test]
fn dce_quantification_runs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(&["phantom", "--mode", "dce", "--out", p(&root.join("ph"))]);
    ok(&[
        "quantify", "--in", p(&root.join("ph/truth.pvol")), "--mode", "dce", "--aif", p(&root.join("ph/aif.csv")),
        "--reference", p(&root.join("ph")), "--out", p(&root.join("maps")),
    ]);
    let m = json(&root.join("maps/metrics.json"));
    assert!(m["ccc"]["ktrans"].as_f64().unwrap() > 0.999);
}

#[test]
fn r_sweep_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("c.json");
    std::fs::write(&cfg, QUICK).unwrap();
    ok(&["phantom", "--out", p(&root.join("ph"))]);
    ok(&["sample", "--in", p(&root.join("ph/truth.pvol")), "--R", "1", "--scheme", "cartesian", "--out", p(&root.join("s"))]);
    ok(&[
        "recon", "--R-sweep", "2,4", "--truth", p(&root.join("s/normalized.pvol")), "--config", p(&cfg),
        "--out", p(&root.join("sweep")),
    ]);
    let rows = json(&root.join("sweep/sweep.json"));
    assert_eq!(rows.as_array().unwrap().len(), 2);
    let csv = std::fs::read_to_string(root.join("sweep/sweep.csv")).unwrap();
    assert!(csv.starts_with("R,rmse,psnr,rmse_zerofill,psnr_zerofill"));
}
