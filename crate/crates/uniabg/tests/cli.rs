//! End-to-end exercises of the `uniabg` binary: exit codes, the staged
//! command chain over a directory, and cross-process determinism.

use std::path::Path;
use std::process::Command;

fn uniabg(dir: &Path) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_uniabg"));
    cmd.current_dir(dir);
    cmd
}

/// Small config JSON so CLI runs stay fast.
fn write_small_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.json");
    let config = serde_json::json!({
        "seed": 0,
        "encoder_dim": 16,
        "stage1": { "epochs": 3, "lr": 0.05, "batch": 12 },
        "stage2": { "epochs": 3, "lr": 0.01, "batch": 12 },
        "dbscan": { "eps": 0.25, "min_samples": 2, "min_samples_satellite": 1 },
        "synth": {
            "num_classes": 8,
            "drones_per_class": 4,
            "sats_per_class": 1,
            "dim": 16,
            "gap_strength": 2.0,
            "noise_sigma": 0.05,
            "seed": 0,
            "emit_images": true
        }
    });
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

#[test]
fn staged_chain_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_small_config(dir.path());
    let cfg = config.to_str().unwrap();

    for sub in ["synth", "apv", "stage1", "associate", "stage2", "eval"] {
        let output = uniabg(dir.path())
            .args([sub, "--config", cfg, "--out", "run"])
            .output()
            .unwrap();
        assert!(
            output.status.success(),
            "{sub} failed: {}",
            String::from_utf8_lossy(&output.stderr)
        );
    }
    for artifact in [
        "manifest.json",
        "drone.uvf",
        "stage1.ckpt",
        "drone_labels.json",
        "associations.json",
        "stage2.ckpt",
        "metrics.json",
    ] {
        assert!(dir.path().join("run").join(artifact).exists(), "{artifact} missing");
    }
}

#[test]
fn bad_config_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    std::fs::write(&config, r#"{"temperature": -1.0}"#).unwrap();
    let output = uniabg(dir.path())
        .args(["synth", "--config", config.to_str().unwrap(), "--out", "run"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&output.stderr).is_empty());

    // Unknown field is also a configuration error.
    std::fs::write(&config, r#"{"not_a_field": 1}"#).unwrap();
    let output = uniabg(dir.path())
        .args(["synth", "--config", config.to_str().unwrap(), "--out", "run"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_with_code_1() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_small_config(dir.path());
    let output = uniabg(dir.path())
        .args(["stage1", "--config", config.to_str().unwrap(), "--out", "empty"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn pipeline_reports_are_identical_across_processes_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_small_config(dir.path());
    let cfg = config.to_str().unwrap();
    let mut reports = Vec::new();
    for (name, threads) in [("a", "1"), ("b", "1"), ("c", "4")] {
        let output = uniabg(dir.path())
            .args(["pipeline", "--config", cfg, "--seed", "7", "--out", name])
            .env("UNIABG_THREADS", threads)
            .output()
            .unwrap();
        assert!(
            output.status.success(),
            "pipeline failed: {}",
            String::from_utf8_lossy(&output.stderr)
        );
        reports.push(std::fs::read(dir.path().join(name).join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    assert_eq!(reports[0], reports[2]);
}

#[test]
fn overrides_show_up_in_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_small_config(dir.path());
    let output = uniabg(dir.path())
        .args([
            "pipeline",
            "--config",
            config.to_str().unwrap(),
            "--seed",
            "5",
            "--k",
            "3",
            "--lambda",
            "0.4",
            "--vote-mode",
            "instance",
            "--out",
            "run",
        ])
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "{}",
        String::from_utf8_lossy(&output.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("run/report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["seed"], 5);
    assert_eq!(report["config"]["hgfc"]["k"], 3);
    assert_eq!(report["config"]["lambda"], 0.4);
    assert_eq!(report["config"]["hgfc"]["vote_mode"], "instance");
}
