//! Behaviour of the `threshcox` binary on small inputs.

use std::path::Path;
use std::process::{Command, Output};

fn threshcox(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_threshcox"))
        .args(args)
        .env_remove("THRESHCOX_SEED")
        .output()
        .expect("binary runs")
}

fn generate(dir: &Path, n: usize, estimated: bool) -> (String, String) {
    let scenario = dir.join("scenario.json");
    let mode = if estimated {
        r#"{"mode": "estimated", "subjects": 200, "replicates": 2}"#
    } else {
        r#"{"mode": "known"}"#
    };
    std::fs::write(
        &scenario,
        format!(r#"{{"n": {n}, "replications": 1, "seed": 7, "nuisance_mode": {mode}}}"#),
    )
    .unwrap();
    let cohort = dir.join("cohort.csv");
    let rel = dir.join("reliability.csv");
    let mut args = vec![
        "generate",
        "--scenario",
        scenario.to_str().unwrap(),
        "-o",
        cohort.to_str().unwrap(),
    ];
    if estimated {
        args.extend(["--reliability-out", rel.to_str().unwrap()]);
    }
    let out = threshcox(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (cohort.to_str().unwrap().into(), rel.to_str().unwrap().into())
}

#[test]
fn generated_data_fits_with_an_estimated_nuisance() {
    let dir = tempfile::tempdir().unwrap();
    let (cohort, rel) = generate(dir.path(), 600, true);
    let out_dir = dir.path().join("fit");
    let out = threshcox(&[
        "fit",
        "--cohort",
        &cohort,
        "--reliability",
        &rel,
        "--method",
        "naive,rc1",
        "--no-variance",
        "-o",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = String::from_utf8(out.stdout).unwrap();
    assert!(report.contains("NAIVE") && report.contains("RC1"), "{report}");
    for f in ["naive.json", "rc1.json", "report.txt", "manifest.json"] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 2);
}

#[test]
fn corrected_methods_require_a_nuisance_source() {
    let dir = tempfile::tempdir().unwrap();
    let (cohort, _) = generate(dir.path(), 200, false);
    let out = threshcox(&[
        "fit",
        "--cohort",
        &cohort,
        "--method",
        "rc1",
        "-o",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("error:"), "{err}");
}

#[test]
fn malformed_rows_are_reported_with_their_line() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bad.csv");
    std::fs::write(&csv, "time,event,w\n1.0,1,0.3\n-2.0,0,0.1\n").unwrap();
    let out = threshcox(&[
        "fit",
        "--cohort",
        csv.to_str().unwrap(),
        "-o",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn unknown_config_keys_are_rejected_with_a_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("grid.json");
    std::fs::write(&cfg, r#"{"base": {"n": 100, "rho": 0.5}}"#).unwrap();
    let out = threshcox(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "-o",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("base") && err.contains("rho"), "{err}");
}

#[test]
fn small_simulation_writes_tables_and_honours_the_seed_variable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("grid.json");
    std::fs::write(
        &cfg,
        r#"{"methods": ["naive"], "harness": {"benchmark": false, "fit": {"compute_variance": false}},
            "base": {"n": 300, "replications": 3}}"#,
    )
    .unwrap();
    let out_dir = dir.path().join("sim");
    let out = Command::new(env!("CARGO_BIN_EXE_threshcox"))
        .args([
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "-o",
            out_dir.to_str().unwrap(),
        ])
        .env("THRESHCOX_SEED", "99")
        .output()
        .unwrap();
    assert!(
        out.status.code().is_some_and(|c| c == 0 || c == 2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in [
        "bias_wide.csv",
        "bias_long.csv",
        "bias.txt",
        "tables.json",
        "manifest.json",
    ] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 99);
    assert_eq!(manifest["seed_from_env"], true);
}
