use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn xaimi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xaimi")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn error_json(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line =
        stderr.lines().rev().find(|l| l.starts_with('{')).unwrap_or_else(|| panic!("no JSON on stderr: {stderr}"));
    serde_json::from_str(line).unwrap()
}

/// Small config in `dir` reading the bundled MNIST files.
fn write_config(dir: &Path) -> PathBuf {
    let source = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist10k").canonicalize().unwrap();
    let text = format!(
        r#"
[run]
name = "cli"
seed = 3
output_dir = "out"

[data]
profile = "mnist"
source = "{}"
limit = 200

[scale]
classifier_divisor = 8
inversion_divisor = 16

[target]
epochs = 1

[eval]
epochs = 1

[inversion]
epochs = 1

[surrogate]
enabled = false

[matrix]
methods = ["prediction_only"]
explanations = ["grad_cam"]
"#,
        source.display()
    );
    let path = dir.join("cli.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn missing_config_reports_config_error() {
    let out = xaimi(&["run"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"]["kind"], "config");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = xaimi(&["--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["kind"], "usage");
}

#[test]
fn unknown_stage_and_conflicting_stage_fail() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let out = xaimi(&["--config", cfg, "--stage", "nope"]);
    assert_eq!(out.status.code(), Some(1));
    let out = xaimi(&["--config", cfg, "--stage", "breach", "evaluate"]);
    assert_eq!(error_json(&out)["error"]["kind"], "config");
}

#[test]
fn stages_run_in_order_and_render_heatmaps() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let cfg = cfg.to_str().unwrap();

    let out = xaimi(&["--config", cfg, "breach"]);
    assert_eq!(out.status.code(), Some(1));
    let err = error_json(&out);
    assert_eq!(err["error"]["kind"], "missing_prerequisite");
    assert!(err["error"]["message"].as_str().unwrap().contains("train-target"));

    let out = xaimi(&["--config", cfg, "--stage", "train-target"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let record: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(record["stage"], "train-target");
    assert_eq!(record["skipped"], false);

    let out = xaimi(&["--config", cfg, "breach"]);
    assert!(out.status.success());

    let plan: Value = serde_json::from_slice(&std::fs::read(tmp.path().join("out/data/splits.json")).unwrap()).unwrap();
    let instance = plan["attack_test_indices"][0].as_u64().unwrap().to_string();
    let png = tmp.path().join("cam.png");
    let out = xaimi(&["--config", cfg, "render-heatmap", "--instance", &instance, "--out", png.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(&std::fs::read(&png).unwrap()[1..4], b"PNG");

    // target-side images were never queried
    let target = plan["target_indices"][0].as_u64().unwrap().to_string();
    let out = xaimi(&["--config", cfg, "render-heatmap", "--instance", &target, "--out", png.to_str().unwrap()]);
    assert_eq!(error_json(&out)["error"]["kind"], "invalid");

    let out = xaimi(&["--config", cfg, "report"]);
    assert_eq!(error_json(&out)["error"]["kind"], "missing_prerequisite");

    let out = xaimi(&["--config", cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines: Vec<Value> =
        String::from_utf8_lossy(&out.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 7);
    assert_eq!(lines[0]["skipped"], true);
    assert!(lines[2..].iter().all(|l| l["skipped"] == false));
    assert!(tmp.path().join("out/report.md").is_file());
    let csv = std::fs::read_to_string(tmp.path().join("out/metrics/instances.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("run_id,instance,metric,value"));
}

#[test]
fn different_seed_writes_a_separate_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = xaimi(&["--config", cfg.to_str().unwrap(), "--seed", "9", "train-target"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("out-seed9/models/accuracy.json").is_file());
    assert!(!tmp.path().join("out").exists());
}
