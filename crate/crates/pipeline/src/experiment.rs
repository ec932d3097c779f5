//! The full self-training experiment: teachers, pseudo-labels, students and
//! their evaluation, collected into one report.

use std::fmt::Write as _;
use std::time::Instant;

use log::info;
use pointq_core::dataset::{Dataset, DatasetConfig};
use pointq_core::metrics::{
    coco_eval, instance_recall, pseudo_miou, tide_diagnose, EvalParams, EvalResult, ErrorProfile, GroundTruth,
    TideParams,
};
use pointq_core::seeding::derive_seed;
use pointq_core::synth::PointMode;
use pointq_model::{Detector, DetectorMode, ModelConfig, Regression};
use serde::{Deserialize, Serialize};

use crate::error::PipelineError;
use crate::plan::TrainPlan;
use crate::pseudo::{detect, generate_pseudo_labels, generate_pseudo_labels_baseline, BaselineScore, PseudoLabel};
use crate::train::{train_student, train_teacher};
use crate::views::{ground_truth, split_view, weak_ground_truth};

/// Extra teacher variants trained alongside the main one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    /// Position-only and category-only point encoders.
    pub encoder: bool,
    /// Main teacher applied to box-center points on the weak set.
    pub center_points: bool,
    /// Teacher with absolute box regression.
    pub absolute_regression: bool,
}

impl Default for Ablations {
    fn default() -> Self {
        Self {
            encoder: true,
            center_points: true,
            absolute_regression: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    /// Master seed; dataset, initializations and schedules derive from it.
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    pub teacher_plan: TrainPlan,
    pub student_plan: TrainPlan,
    pub baseline_tau: f64,
    pub baseline_score: BaselineScore,
    /// Also train a student on the baseline's pseudo-labels.
    pub baseline_student: bool,
    pub ablations: Ablations,
    pub eval_batch_size: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "desk".into(),
            seed: 0,
            dataset: DatasetConfig::default(),
            teacher: desk_teacher(),
            student: ModelConfig::set_prediction(),
            teacher_plan: TrainPlan::desk(60),
            student_plan: TrainPlan::desk(60),
            baseline_tau: 0.7,
            baseline_score: BaselineScore::Probability,
            baseline_student: false,
            ablations: Ablations::default(),
            eval_batch_size: 64,
        }
    }
}

/// Point-mode defaults with a temperature suited to an 8x8 feature grid.
pub fn desk_teacher() -> ModelConfig {
    let mut c = ModelConfig::default();
    c.point_encoder.temperature = 20.0;
    c
}

impl ExperimentConfig {
    /// Copy with every component seed derived from `self.seed`.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.dataset.seed = self.seed;
        c.teacher.init_seed = derive_seed(self.seed, 1);
        c.student.init_seed = derive_seed(self.seed, 2);
        c.teacher_plan.seed = derive_seed(self.seed, 3);
        c.student_plan.seed = derive_seed(self.seed, 4);
        c
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.teacher.mode != DetectorMode::Point {
            return bad("teacher must be a point-mode model".into());
        }
        if self.student.mode != DetectorMode::Set {
            return bad("student must be a set-mode model".into());
        }
        if !(self.dataset.fraction > 0.0 && self.dataset.fraction < 1.0) {
            return bad(format!("fraction {} outside (0, 1)", self.dataset.fraction));
        }
        if !(0.0..=1.0).contains(&self.baseline_tau) {
            return bad(format!("baseline_tau {} outside [0, 1]", self.baseline_tau));
        }
        let n_cat = self.dataset.scene.num_categories();
        for (name, m) in [("teacher", &self.teacher), ("student", &self.student)] {
            if m.num_categories != n_cat {
                return bad(format!("{name} has {} categories, dataset has {n_cat}", m.num_categories));
            }
            if m.canvas_size != self.dataset.scene.canvas_size {
                return bad(format!("{name} canvas {} != dataset canvas {}", m.canvas_size, self.dataset.scene.canvas_size));
            }
            m.validate()?;
        }
        if self.student.num_queries < self.dataset.scene.max_instances {
            return bad(format!(
                "student has {} queries but scenes hold up to {} instances",
                self.student.num_queries, self.dataset.scene.max_instances
            ));
        }
        self.teacher_plan.validate()?;
        self.student_plan.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    pub variant: String,
    pub miou: f64,
    /// Share of weak instances with a same-class pseudo-box of IoU >= 0.5.
    pub recall50: f64,
    /// Share of pseudo-boxes that do not contain their source point.
    pub outside_point_fraction: f64,
    pub pseudo_labels: usize,
    pub loss_log: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub tau: f64,
    pub pseudo_labels: usize,
    pub recall50: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentReport {
    pub name: String,
    pub training_images: usize,
    pub eval: EvalResult,
    pub tide: ErrorProfile,
    pub loss_log: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub seed: u64,
    pub fraction: f64,
    pub full_images: usize,
    pub weak_images: usize,
    pub weak_instances: usize,
    pub test_images: usize,
    pub test_instances: usize,
    pub teachers: Vec<TeacherReport>,
    pub baseline: BaselineReport,
    pub students: Vec<StudentReport>,
}

impl ExperimentReport {
    pub fn teacher(&self, variant: &str) -> Option<&TeacherReport> {
        self.teachers.iter().find(|t| t.variant == variant)
    }

    pub fn student(&self, name: &str) -> Option<&StudentReport> {
        self.students.iter().find(|s| s.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Long-format table: `section,name,metric,value`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("section,name,metric,value\n");
        let mut row = |sec: &str, name: &str, metric: &str, v: Option<f64>| {
            let v = v.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{sec},{name},{metric},{v}");
        };
        for t in &self.teachers {
            row("teacher", &t.variant, "miou", Some(t.miou));
            row("teacher", &t.variant, "recall50", Some(t.recall50));
            row("teacher", &t.variant, "outside_point_fraction", Some(t.outside_point_fraction));
        }
        row("baseline", "detr", "recall50", Some(self.baseline.recall50));
        row("baseline", "detr", "pseudo_labels", Some(self.baseline.pseudo_labels as f64));
        for st in &self.students {
            for (k, v) in eval_rows(&st.eval) {
                row("student", &st.name, k, v);
            }
        }
        s
    }
}

pub fn eval_rows(e: &EvalResult) -> Vec<(&'static str, Option<f64>)> {
    vec![
        ("ap", Some(e.ap)),
        ("ap50", Some(e.ap50)),
        ("ap75", Some(e.ap75)),
        ("ap_small", e.ap_small),
        ("ap_medium", e.ap_medium),
        ("ap_large", e.ap_large),
        ("ar1", Some(e.ar1)),
        ("ar10", Some(e.ar10)),
        ("ar100", Some(e.ar100)),
        ("ar_small", e.ar_small),
        ("ar_medium", e.ar_medium),
        ("ar_large", e.ar_large),
    ]
}

/// mIoU, recall and point containment of point pseudo-labels.
pub fn score_point_labels(
    variant: &str,
    labels: &[PseudoLabel],
    weak_gt: &[GroundTruth],
    loss_log: Vec<f64>,
) -> Result<TeacherReport, PipelineError> {
    let pairs: Vec<_> = labels
        .iter()
        .map(|l| (l.annotation_id.expect("point label"), l.bbox))
        .collect();
    let dets: Vec<_> = labels.iter().map(PseudoLabel::as_detection).collect();
    let outside = labels
        .iter()
        .filter(|l| l.point.is_some_and(|p| !l.bbox.contains(p.x, p.y)))
        .count();
    Ok(TeacherReport {
        variant: variant.into(),
        miou: pseudo_miou(&pairs, weak_gt)?,
        recall50: instance_recall(&dets, weak_gt, 0.5),
        outside_point_fraction: outside as f64 / labels.len().max(1) as f64,
        pseudo_labels: labels.len(),
        loss_log,
    })
}

fn evaluate_student(
    name: &str,
    model: &Detector,
    test: &Dataset,
    test_gt: &[GroundTruth],
    training_images: usize,
    loss_log: Vec<f64>,
    batch: usize,
) -> Result<StudentReport, PipelineError> {
    let images: Vec<(u64, &[u8])> = test.scenes.iter().map(|s| (s.id, s.image.as_slice())).collect();
    let dets = detect(model, &images, batch)?;
    let canvas = test.scene_config.canvas_size;
    Ok(StudentReport {
        name: name.into(),
        training_images,
        eval: coco_eval(&dets, test_gt, &EvalParams::for_canvas(canvas)),
        tide: tide_diagnose(&dets, test_gt, &TideParams::for_canvas(canvas)),
        loss_log,
    })
}

fn teacher_variant(base: &ModelConfig, f: impl FnOnce(&mut ModelConfig)) -> ModelConfig {
    let mut c = base.clone();
    f(&mut c);
    c
}

/// Runs every stage in sequence and evaluates each model. The result depends
/// only on `config`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, PipelineError> {
    config.validate()?;
    let cfg = config.resolved();
    let clock = Instant::now();
    let ds = Dataset::build_train(&cfg.dataset)?;
    let test = Dataset::build_test(&cfg.dataset)?;
    let view = split_view(&ds)?;
    let weak_gt = weak_ground_truth(&ds)?;
    let test_gt = ground_truth(&test);
    let batch = cfg.eval_batch_size;
    info!(
        "{}: {} full, {} weak, {} test scenes",
        cfg.name,
        view.full.len(),
        view.weak.len(),
        test.scenes.len()
    );

    let mut teachers = Vec::new();
    let main = train_teacher(&cfg.teacher, &cfg.teacher_plan, &view.full)?;
    let point_labels = generate_pseudo_labels(&main.model, &view.weak, batch)?;
    teachers.push(score_point_labels("pos+cat", &point_labels, &weak_gt, main.meta.loss_log.clone())?);
    info!("main teacher done at {:.0}s", clock.elapsed().as_secs_f64());

    if cfg.ablations.center_points {
        let centered = ds.with_point_mode(PointMode::Center);
        let cview = split_view(&centered)?;
        let labels = generate_pseudo_labels(&main.model, &cview.weak, batch)?;
        teachers.push(score_point_labels("center", &labels, &weak_gt, Vec::new())?);
    }
    let mut variants = Vec::new();
    if cfg.ablations.encoder {
        variants.push(("pos-only", teacher_variant(&cfg.teacher, |c| c.point_encoder.use_cat = false)));
        variants.push(("cat-only", teacher_variant(&cfg.teacher, |c| c.point_encoder.use_pos = false)));
    }
    if cfg.ablations.absolute_regression {
        variants.push(("absolute", teacher_variant(&cfg.teacher, |c| c.regression = Regression::Absolute)));
    }
    for (name, mc) in variants {
        let t = train_teacher(&mc, &cfg.teacher_plan, &view.full)?;
        let labels = generate_pseudo_labels(&t.model, &view.weak, batch)?;
        teachers.push(score_point_labels(name, &labels, &weak_gt, t.meta.loss_log)?);
        info!("{name} teacher done at {:.0}s", clock.elapsed().as_secs_f64());
    }

    let mut students = Vec::new();
    let supervised = train_student(&cfg.student, &cfg.student_plan, &view.full, &[], &[])?;
    let baseline_labels = generate_pseudo_labels_baseline(
        &supervised.model,
        &view.weak,
        cfg.baseline_tau,
        cfg.baseline_score,
        batch,
    )?;
    let baseline_dets: Vec<_> = baseline_labels.iter().map(PseudoLabel::as_detection).collect();
    let baseline = BaselineReport {
        tau: cfg.baseline_tau,
        pseudo_labels: baseline_labels.len(),
        recall50: instance_recall(&baseline_dets, &weak_gt, 0.5),
    };
    students.push(evaluate_student(
        "supervised",
        &supervised.model,
        &test,
        &test_gt,
        view.full.len(),
        supervised.meta.loss_log,
        batch,
    )?);
    info!("supervised done at {:.0}s", clock.elapsed().as_secs_f64());

    let n_all = view.full.len() + view.weak.len();
    let student = train_student(&cfg.student, &cfg.student_plan, &view.full, &view.weak, &point_labels)?;
    students.push(evaluate_student("point", &student.model, &test, &test_gt, n_all, student.meta.loss_log, batch)?);
    info!("point student done at {:.0}s", clock.elapsed().as_secs_f64());

    if cfg.baseline_student {
        let s = train_student(&cfg.student, &cfg.student_plan, &view.full, &view.weak, &baseline_labels)?;
        students.push(evaluate_student("baseline", &s.model, &test, &test_gt, n_all, s.meta.loss_log, batch)?);
        info!("baseline student done at {:.0}s", clock.elapsed().as_secs_f64());
    }

    Ok(ExperimentReport {
        name: cfg.name.clone(),
        seed: cfg.seed,
        fraction: cfg.dataset.fraction,
        full_images: view.full.len(),
        weak_images: view.weak.len(),
        weak_instances: weak_gt.len(),
        test_images: test.scenes.len(),
        test_instances: test_gt.len(),
        teachers,
        baseline,
        students,
    })
}

/// One row of an AP-versus-fraction table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub method: String,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

/// Student names in a sweep report and the method label for each.
pub const SWEEP_METHODS: [(&str, &str); 3] = [
    ("point", "point-teacher"),
    ("baseline", "baseline-teacher"),
    ("supervised", "supervised-only"),
];

/// Runs the experiment once per fraction, without teacher ablations, and
/// reports the three students for each.
pub fn run_sweep(config: &ExperimentConfig, fractions: &[f64]) -> Result<Vec<SweepRow>, PipelineError> {
    let mut rows = Vec::with_capacity(fractions.len() * SWEEP_METHODS.len());
    for &fraction in fractions {
        let mut c = config.clone();
        c.dataset.fraction = fraction;
        c.ablations = Ablations {
            encoder: false,
            center_points: false,
            absolute_regression: false,
        };
        c.baseline_student = true;
        let report = run_experiment(&c)?;
        for (student, method) in SWEEP_METHODS {
            let s = report.student(student).expect("sweep trains every student");
            rows.push(SweepRow {
                fraction,
                method: method.into(),
                ap: s.eval.ap,
                ap50: s.eval.ap50,
                ap75: s.eval.ap75,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("fraction,method,ap,ap50,ap75\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.fraction, r.method, r.ap, r.ap50, r.ap75);
    }
    s
}

/// Per-epoch training losses of every model in the report:
/// `model,epoch,loss`.
pub fn learning_curves_csv(report: &ExperimentReport) -> String {
    let mut s = String::from("model,epoch,loss\n");
    let logs = report
        .teachers
        .iter()
        .map(|t| (format!("teacher:{}", t.variant), &t.loss_log))
        .chain(report.students.iter().map(|st| (format!("student:{}", st.name), &st.loss_log)));
    for (name, log) in logs {
        for (e, l) in log.iter().enumerate() {
            let _ = writeln!(s, "{name},{},{l}", e + 1);
        }
    }
    s
}
