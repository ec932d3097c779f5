use std::path::Path;
use std::process::{Command, Output};

use pointq_model::{DetectorMode, ModelConfig};
use pointq_pipeline::{ExperimentConfig, TrainPlan};

fn tiny_model(mode: DetectorMode) -> ModelConfig {
    ModelConfig {
        mode,
        backbone_channels: vec![4, 8, 8, 16],
        d_model: 16,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        ffn_dim: 32,
        num_queries: 6,
        ..ModelConfig::default()
    }
}

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let plan = TrainPlan {
        batch_size: 4,
        ..TrainPlan::desk(1)
    };
    let mut c = ExperimentConfig {
        teacher: tiny_model(DetectorMode::Point),
        student: tiny_model(DetectorMode::Set),
        teacher_plan: plan.clone(),
        student_plan: plan,
        ..ExperimentConfig::default()
    };
    c.dataset.num_scenes = 10;
    c.dataset.num_test_scenes = 4;
    let path = dir.join("tiny.json");
    std::fs::write(&path, serde_json::to_string_pretty(&c).unwrap()).unwrap();
    path
}

fn pointq(runs: &Path, config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pointq"))
        .env("POINTQ_RUNS", runs)
        .env("RUST_LOG", "warn")
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn manifest_hash(stdout: &str) -> String {
    stdout.split_whitespace().last().unwrap().to_string()
}

#[test]
fn evaluate_without_training_names_the_missing_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let runs = tmp.path().join("runs");
    ok(&pointq(&runs, &cfg, &["gen-data"]));
    let out = pointq(&runs, &cfg, &["evaluate"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing checkpoint"), "{err}");
    assert!(err.contains("pointq train-student"), "{err}");
}

#[test]
fn full_workflow_writes_every_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let runs = tmp.path().join("runs");
    let steps: [&[&str]; 9] = [
        &["gen-data"],
        &["train-teacher"],
        &["pseudo-label"],
        &["train-student", "--supervised-only"],
        &["pseudo-label", "--baseline", "--tau", "0.3"],
        &["train-student"],
        &["train-student", "--pseudo", "pseudo-baseline"],
        &["evaluate"],
        &["diagnose", "--model", "supervised"],
    ];
    for s in steps {
        ok(&pointq(&runs, &cfg, s));
    }
    let run = runs.join("desk");
    for f in [
        "data/train/dataset.json",
        "data/test/dataset.json",
        "teacher/model.safetensors",
        "pseudo/labels.json",
        "pseudo/quality.json",
        "supervised/model.safetensors",
        "pseudo-baseline/labels.json",
        "student/model.safetensors",
        "student-baseline/model.safetensors",
        "eval-student/metrics.json",
        "eval-student/metrics.csv",
        "diagnose-supervised/tide.json",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("student/manifest.json")).unwrap()).unwrap();
    assert!(manifest["upstream"]["pseudo"]["labels.json"].is_string());
    assert!(manifest["upstream"]["data"]["train"].is_string());

    let again = pointq(&runs, &cfg, &["train-teacher"]);
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("already exists"));
}

#[test]
fn identical_config_and_seed_give_identical_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let (r1, r2) = (tmp.path().join("r1"), tmp.path().join("r2"));
    let a = manifest_hash(&ok(&pointq(&r1, &cfg, &["gen-data"])));
    let b = manifest_hash(&ok(&pointq(&r2, &cfg, &["gen-data"])));
    let c = manifest_hash(&ok(&pointq(&r1, &cfg, &["--name", "c", "--seed", "9", "gen-data"])));
    assert_eq!(a, b);
    assert_ne!(a, c);
    ok(&pointq(&r1, &cfg, &["train-teacher"]));
    ok(&pointq(&r2, &cfg, &["train-teacher"]));
    let read = |root: &Path| std::fs::read(root.join("desk/teacher/manifest.json")).unwrap();
    assert_eq!(read(&r1), read(&r2));
}

#[test]
fn strict_mode_rejects_config_drift() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let runs = tmp.path().join("runs");
    ok(&pointq(&runs, &cfg, &["gen-data"]));
    let out = pointq(&runs, &cfg, &["--seed", "4", "--strict", "train-teacher"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("differs"));
    ok(&pointq(&runs, &cfg, &["--seed", "4", "train-teacher"]));
}

#[test]
fn sweep_reports_two_by_three_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let runs = tmp.path().join("runs");
    ok(&pointq(&runs, &cfg, &["sweep", "--fractions", "0.1,0.2"]));
    let csv = std::fs::read_to_string(runs.join("desk/sweep/sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    assert!(rows[0].starts_with("0.1,point-teacher,"));
    assert!(rows[5].starts_with("0.2,supervised-only,"));
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let runs = tmp.path().join("runs");
    assert_eq!(pointq(&runs, &cfg, &["no-such-command"]).status.code(), Some(1));
    assert_eq!(pointq(&runs, &cfg, &["--fraction", "1.5", "gen-data"]).status.code(), Some(1));
    assert_eq!(pointq(&runs, &cfg, &["sweep", "--fractions", "0.0"]).status.code(), Some(1));
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(pointq(&runs, &bad, &["gen-data"]).status.code(), Some(1));
    let out = ok(&pointq(&runs, &cfg, &["print-config"]));
    let parsed: ExperimentConfig = serde_json::from_str(&out).unwrap();
    assert_eq!(parsed.dataset.num_scenes, 10);
}
