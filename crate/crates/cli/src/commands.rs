use std::fs;

use anyhow::Context;
use pointq_core::dataset::{load_dataset, save_dataset, Dataset};
use pointq_core::metrics::{coco_eval, tide_diagnose, EvalParams, TideParams};
use pointq_model::{load_checkpoint, save_checkpoint, Detector, DetectorMode, Regression};
use pointq_pipeline::experiment::eval_rows;
use pointq_pipeline::{
    detect, generate_pseudo_labels, generate_pseudo_labels_baseline, ground_truth, learning_curves_csv,
    load_pseudo_labels, run_experiment, run_sweep, save_pseudo_labels, score_point_labels, split_view,
    sweep_csv, train_student, train_teacher, weak_ground_truth, ExperimentConfig, PseudoLabel,
};

use crate::run::{Run, Stage};
use crate::{Cli, CliError, Command, GlobalArgs, TeacherVariant};

const CHECKPOINT: &str = "model.safetensors";
const TRAIN_DATA: &str = "train/dataset.json";
const TEST_DATA: &str = "test/dataset.json";
const LABELS: &str = "labels.json";

/// Loads, overrides, validates and resolves the experiment config.
pub fn load_config(g: &GlobalArgs) -> Result<ExperimentConfig, CliError> {
    let mut c = match &g.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::User(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::User(format!("invalid config {}: {e}", p.display())))?
        }
        None => ExperimentConfig::default(),
    };
    c.name = g.name.clone();
    if let Some(s) = g.seed {
        c.seed = s;
    }
    if let Some(f) = g.fraction {
        c.dataset.fraction = f;
    }
    if let Some(m) = g.point_mode {
        c.dataset.point_mode = m;
    }
    c.validate()?;
    Ok(c.resolved())
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let config = load_config(&cli.global)?;
    if let Command::PrintConfig = cli.command {
        println!("{}", serde_json::to_string_pretty(&config).expect("config serializes"));
        return Ok(());
    }
    let mut run = Run::new(&cli.global.runs, &cli.global.name, config, cli.global.strict);
    let (stage_name, hash) = match &cli.command {
        Command::PrintConfig => unreachable!(),
        Command::GenData => gen_data(&mut run)?,
        Command::TrainTeacher { variant } => cmd_train_teacher(&mut run, *variant)?,
        Command::PseudoLabel { baseline, tau, teacher } => cmd_pseudo_label(&mut run, *baseline, *tau, teacher)?,
        Command::TrainStudent { supervised_only, pseudo } => cmd_train_student(&mut run, *supervised_only, pseudo)?,
        Command::Evaluate { model } => cmd_evaluate(&mut run, model)?,
        Command::Diagnose { model } => cmd_diagnose(&mut run, model)?,
        Command::RunExperiment => cmd_run_experiment(&mut run)?,
        Command::Sweep { fractions } => cmd_sweep(&mut run, fractions)?,
    };
    println!("{} manifest {hash}", run.stage_dir(&stage_name).display());
    Ok(())
}

fn finish(run: &Run, stage: Stage) -> Result<(String, String), CliError> {
    let name = stage.name.clone();
    let hash = run.finish(stage)?;
    Ok((name, hash))
}

fn load_data(run: &mut Run, file: &str) -> Result<Dataset, CliError> {
    let path = run.require("data", file, "pointq gen-data")?;
    Ok(load_dataset(&path)?)
}

fn load_model(run: &mut Run, stage: &str, expected: DetectorMode) -> Result<Detector, CliError> {
    let hint = match stage {
        s if s.starts_with("teacher") => "pointq train-teacher".to_string(),
        "supervised" => "pointq train-student --supervised-only".to_string(),
        _ => "pointq train-student".to_string(),
    };
    let path = run.require(stage, CHECKPOINT, &hint)?;
    let (model, _) = load_checkpoint(&path)?;
    if model.config().mode != expected {
        return Err(CliError::User(format!(
            "stage '{stage}' holds a {} model, this command needs {expected}",
            model.config().mode
        )));
    }
    Ok(model)
}

fn loss_csv(log: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (e, l) in log.iter().enumerate() {
        s.push_str(&format!("{},{l}\n", e + 1));
    }
    s
}

fn gen_data(run: &mut Run) -> Result<(String, String), CliError> {
    let stage = run.begin("data")?;
    let train = Dataset::build_train(&run.config.dataset)?;
    let test = Dataset::build_test(&run.config.dataset)?;
    for (ds, file) in [(&train, TRAIN_DATA), (&test, TEST_DATA)] {
        let path = stage.path(file);
        fs::create_dir_all(path.parent().expect("nested path")).context("creating dataset dir")?;
        save_dataset(ds, &path)?;
    }
    finish(run, stage)
}

fn cmd_train_teacher(run: &mut Run, variant: TeacherVariant) -> Result<(String, String), CliError> {
    let ds = load_data(run, TRAIN_DATA)?;
    let mut mc = run.config.teacher.clone();
    let name = match variant {
        TeacherVariant::Main => "teacher",
        TeacherVariant::PosOnly => {
            mc.point_encoder.use_cat = false;
            "teacher-pos-only"
        }
        TeacherVariant::CatOnly => {
            mc.point_encoder.use_pos = false;
            "teacher-cat-only"
        }
        TeacherVariant::Absolute => {
            mc.regression = Regression::Absolute;
            "teacher-absolute"
        }
    };
    let stage = run.begin(name)?;
    let view = split_view(&ds)?;
    let trained = train_teacher(&mc, &run.config.teacher_plan, &view.full)?;
    save_checkpoint(&trained.model, &trained.meta, &stage.path(CHECKPOINT))?;
    stage.write("loss.csv", loss_csv(&trained.meta.loss_log))?;
    finish(run, stage)
}

fn cmd_pseudo_label(run: &mut Run, baseline: bool, tau: f64, teacher: &str) -> Result<(String, String), CliError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(CliError::User(format!("--tau {tau} outside [0, 1]")));
    }
    let ds = load_data(run, TRAIN_DATA)?;
    let ds = ds.with_point_mode(run.config.dataset.point_mode);
    let batch = run.config.eval_batch_size;
    let canvas = ds.scene_config.canvas_size;
    let weak_gt = weak_ground_truth(&ds)?;
    let (mut stage, labels) = if baseline {
        let model = load_model(run, "supervised", DetectorMode::Set)?;
        let mut stage = run.begin("pseudo-baseline")?;
        stage.option("tau", tau);
        let view = split_view(&ds)?;
        let labels = generate_pseudo_labels_baseline(&model, &view.weak, tau, run.config.baseline_score, batch)?;
        (stage, labels)
    } else {
        let model = load_model(run, teacher, DetectorMode::Point)?;
        let name = match teacher.strip_prefix("teacher") {
            Some(suffix) => format!("pseudo{suffix}"),
            None => format!("pseudo-{teacher}"),
        };
        let mut stage = run.begin(&name)?;
        stage.option("teacher", teacher);
        let view = split_view(&ds)?;
        (stage, generate_pseudo_labels(&model, &view.weak, batch)?)
    };
    stage.option("point_mode", serde_json::to_string(&run.config.dataset.point_mode).expect("serializes"));
    save_pseudo_labels(&labels, canvas, &stage.path(LABELS))?;
    let quality = if baseline {
        let dets: Vec<_> = labels.iter().map(PseudoLabel::as_detection).collect();
        serde_json::json!({
            "pseudo_labels": labels.len(),
            "recall50": pointq_core::metrics::instance_recall(&dets, &weak_gt, 0.5),
        })
    } else {
        serde_json::to_value(score_point_labels(teacher, &labels, &weak_gt, Vec::new())?).expect("serializes")
    };
    stage.write("quality.json", serde_json::to_vec_pretty(&quality).expect("serializes"))?;
    finish(run, stage)
}

fn cmd_train_student(run: &mut Run, supervised_only: bool, pseudo: &str) -> Result<(String, String), CliError> {
    let ds = load_data(run, TRAIN_DATA)?;
    let view = split_view(&ds)?;
    let (stage, trained) = if supervised_only {
        let stage = run.begin("supervised")?;
        let t = train_student(&run.config.student, &run.config.student_plan, &view.full, &[], &[])?;
        (stage, t)
    } else {
        let hint = if pseudo == "pseudo-baseline" {
            "pointq pseudo-label --baseline"
        } else {
            "pointq pseudo-label"
        };
        let labels = load_pseudo_labels(&run.require(pseudo, LABELS, hint)?)?;
        let name = match pseudo.strip_prefix("pseudo") {
            Some(suffix) => format!("student{suffix}"),
            None => format!("student-{pseudo}"),
        };
        let mut stage = run.begin(&name)?;
        stage.option("pseudo", pseudo);
        let t = train_student(&run.config.student, &run.config.student_plan, &view.full, &view.weak, &labels)?;
        (stage, t)
    };
    save_checkpoint(&trained.model, &trained.meta, &stage.path(CHECKPOINT))?;
    stage.write("loss.csv", loss_csv(&trained.meta.loss_log))?;
    finish(run, stage)
}

fn test_detections(
    run: &mut Run,
    model_stage: &str,
) -> Result<(Vec<pointq_core::metrics::Detection>, Vec<pointq_core::metrics::GroundTruth>, usize), CliError> {
    let model = load_model(run, model_stage, DetectorMode::Set)?;
    let test = load_data(run, TEST_DATA)?;
    let images: Vec<(u64, &[u8])> = test.scenes.iter().map(|s| (s.id, s.image.as_slice())).collect();
    let dets = detect(&model, &images, run.config.eval_batch_size)?;
    Ok((dets, ground_truth(&test), test.scene_config.canvas_size))
}

fn cmd_evaluate(run: &mut Run, model: &str) -> Result<(String, String), CliError> {
    let (dets, gt, canvas) = test_detections(run, model)?;
    let stage = run.begin(&format!("eval-{model}"))?;
    let result = coco_eval(&dets, &gt, &EvalParams::for_canvas(canvas));
    let mut csv = String::from("metric,value\n");
    for (k, v) in eval_rows(&result) {
        csv.push_str(&format!("{k},{}\n", v.map(|v| v.to_string()).unwrap_or_default()));
    }
    stage.write("metrics.json", serde_json::to_vec_pretty(&result).expect("serializes"))?;
    stage.write("metrics.csv", csv)?;
    finish(run, stage)
}

fn cmd_diagnose(run: &mut Run, model: &str) -> Result<(String, String), CliError> {
    let (dets, gt, canvas) = test_detections(run, model)?;
    let stage = run.begin(&format!("diagnose-{model}"))?;
    let profile = tide_diagnose(&dets, &gt, &TideParams::for_canvas(canvas));
    let value = serde_json::to_value(&profile).expect("serializes");
    let mut csv = String::from("section,error,value\n");
    for section in ["counts", "delta_ap"] {
        if let Some(obj) = value.get(section).and_then(|v| v.as_object()) {
            for (k, v) in obj {
                csv.push_str(&format!("{section},{k},{v}\n"));
            }
        }
    }
    stage.write("tide.json", serde_json::to_vec_pretty(&profile).expect("serializes"))?;
    stage.write("tide.csv", csv)?;
    finish(run, stage)
}

fn cmd_run_experiment(run: &mut Run) -> Result<(String, String), CliError> {
    let stage = run.begin("experiment")?;
    let report = run_experiment(&run.config)?;
    stage.write("report.json", report.to_json())?;
    stage.write("report.csv", report.to_csv())?;
    stage.write("learning_curves.csv", learning_curves_csv(&report))?;
    finish(run, stage)
}

fn cmd_sweep(run: &mut Run, fractions: &[f64]) -> Result<(String, String), CliError> {
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f < 1.0)) {
        return Err(CliError::User(format!("fraction {f} outside (0, 1)")));
    }
    let mut stage = run.begin("sweep")?;
    stage.option("fractions", format!("{fractions:?}"));
    let rows = run_sweep(&run.config, fractions)?;
    stage.write("sweep.json", serde_json::to_vec_pretty(&rows).expect("serializes"))?;
    stage.write("sweep.csv", sweep_csv(&rows))?;
    finish(run, stage)
}

