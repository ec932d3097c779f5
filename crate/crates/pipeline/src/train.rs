//! Training loops for the point-conditioned teacher and the set-prediction
//! student.

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use log::info;
use pointq_core::geometry::{BBox, PointAnnotation};
use pointq_core::seeding::rng_for;
use pointq_core::synth::{sample_point, PointMode};
use pointq_model::{
    batch_set_loss, box_loss_tensor, match_targets, CheckpointMeta, Detector, DetectorMode, ModelConfig,
    ModelError,
};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::PipelineError;
use crate::plan::TrainPlan;
use crate::pseudo::PseudoLabel;
use crate::views::{FullImage, WeakImage};

const TEACHER_STREAM: u64 = 0x7EAC;
const STUDENT_STREAM: u64 = 0x57D7;

/// A trained model with its per-epoch mean loss.
pub struct Trained {
    pub model: Detector,
    pub meta: CheckpointMeta,
}

struct Optim {
    opt: AdamW,
    vars: Vec<Var>,
}

impl Optim {
    fn new(model: &Detector, plan: &TrainPlan) -> Result<Self, PipelineError> {
        let vars: Vec<Var> = model.params().vars().values().cloned().collect();
        let params = ParamsAdamW {
            lr: plan.lr,
            weight_decay: plan.weight_decay,
            ..ParamsAdamW::default()
        };
        Ok(Self {
            opt: AdamW::new(vars.clone(), params)?,
            vars,
        })
    }

    fn step(&mut self, loss: &Tensor, lr: f64, clip: f64) -> Result<(), PipelineError> {
        let mut grads: GradStore = loss.backward()?;
        if clip > 0.0 {
            let mut sq = 0.0;
            for v in &self.vars {
                if let Some(g) = grads.get(v.as_tensor()) {
                    sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                }
            }
            let norm = sq.sqrt();
            if norm > clip {
                let scale = clip / (norm + 1e-6);
                for v in &self.vars {
                    if let Some(g) = grads.remove(v.as_tensor()) {
                        grads.insert(v.as_tensor(), (g * scale)?);
                    }
                }
            }
        }
        self.opt.set_learning_rate(lr);
        self.opt.step(&grads)?;
        Ok(())
    }
}

fn scalar(t: &Tensor) -> Result<f64, PipelineError> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn check_finite(stage: &'static str, epoch: usize, step: usize, loss: f64) -> Result<(), PipelineError> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(PipelineError::Divergence {
            stage,
            epoch,
            step,
            loss,
        })
    }
}

/// Trains a point-mode model on the fully labeled scenes. Every epoch draws a
/// fresh mask point per instance.
pub fn train_teacher(
    config: &ModelConfig,
    plan: &TrainPlan,
    full: &[FullImage<'_>],
) -> Result<Trained, PipelineError> {
    plan.validate()?;
    if config.mode != DetectorMode::Point {
        return Err(ModelError::ModeMismatch {
            expected: DetectorMode::Point,
            actual: config.mode,
        }
        .into());
    }
    if full.is_empty() {
        return Err(PipelineError::EmptyTrainingSet("teacher"));
    }
    let model = Detector::new(config.clone())?;
    let mut optim = Optim::new(&model, plan)?;
    let steps = full.len().div_ceil(plan.batch_size);
    let dev = model.device().clone();
    let mut loss_log = Vec::with_capacity(plan.epochs);
    let mut order: Vec<usize> = (0..full.len()).collect();
    for epoch in 0..plan.epochs {
        let mut rng = rng_for(plan.seed ^ TEACHER_STREAM, epoch as u64);
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for (step, chunk) in order.chunks(plan.batch_size).enumerate() {
            let mut images = Vec::with_capacity(chunk.len());
            let mut flips = Vec::with_capacity(chunk.len());
            let mut points: Vec<Vec<PointAnnotation>> = Vec::with_capacity(chunk.len());
            let mut targets: Vec<f32> = Vec::new();
            for &i in chunk {
                let scene = full[i].scene;
                let flip = plan.hflip && rng.random_bool(0.5);
                let mut pts = Vec::with_capacity(scene.instances.len());
                for inst in &scene.instances {
                    let p = sample_point(inst, PointMode::Mask, &mut rng);
                    let (p, b) = if flip { (p.hflipped(), inst.bbox.hflipped()) } else { (p, inst.bbox) };
                    pts.push(p);
                    targets.extend(b.as_array().iter().map(|&v| v as f32));
                }
                images.push(scene.image.as_slice());
                flips.push(flip);
                points.push(pts);
            }
            let n = targets.len() / 4;
            if n == 0 {
                continue;
            }
            let x = model.image_tensor(&images, &flips)?;
            let target = Tensor::from_vec(targets, (n, 4), &dev)?;
            let outs = model.point_forward_train(&x, &points)?;
            let w = &config.loss;
            let mut loss = Tensor::zeros((), DType::F32, &dev)?;
            for boxes in &outs {
                loss = (loss + box_loss_tensor(boxes, &target, w.l1, w.giou)?.mean_all()?)?;
            }
            let last = scalar(&box_loss_tensor(outs.last().expect("one layer"), &target, w.l1, w.giou)?.mean_all()?)?;
            check_finite("teacher", epoch, step, last)?;
            optim.step(&loss, plan.lr_at(epoch, step, steps), plan.grad_clip)?;
            sum += last * n as f64;
            count += n;
        }
        let mean = sum / count.max(1) as f64;
        info!("teacher epoch {}/{}: box loss {mean:.4}", epoch + 1, plan.epochs);
        loss_log.push(mean);
    }
    Ok(Trained {
        model,
        meta: CheckpointMeta {
            epoch: plan.epochs,
            seed: plan.seed,
            loss_log,
        },
    })
}

/// One training image of the student with its (pseudo) ground truth.
struct Sample<'a> {
    image: &'a [u8],
    targets: Vec<(usize, BBox)>,
}

/// Trains a set-prediction model on fully labeled scenes plus weak scenes
/// labeled by `pseudo`. Both kinds are shuffled together every epoch.
pub fn train_student(
    config: &ModelConfig,
    plan: &TrainPlan,
    full: &[FullImage<'_>],
    weak: &[WeakImage<'_>],
    pseudo: &[PseudoLabel],
) -> Result<Trained, PipelineError> {
    plan.validate()?;
    if config.mode != DetectorMode::Set {
        return Err(ModelError::ModeMismatch {
            expected: DetectorMode::Set,
            actual: config.mode,
        }
        .into());
    }
    let mut samples: Vec<Sample> = full
        .iter()
        .map(|f| Sample {
            image: &f.scene.image,
            targets: f.scene.instances.iter().map(|i| (i.category, i.bbox)).collect(),
        })
        .collect();
    if !pseudo.is_empty() {
        let mut by_scene: std::collections::BTreeMap<u64, Vec<(usize, BBox)>> = Default::default();
        for p in pseudo {
            by_scene.entry(p.scene_id).or_default().push((p.category, p.bbox));
        }
        for w in weak {
            samples.push(Sample {
                image: w.image,
                targets: by_scene.remove(&w.scene_id).unwrap_or_default(),
            });
        }
    }
    if samples.is_empty() {
        return Err(PipelineError::EmptyTrainingSet("student"));
    }
    let model = Detector::new(config.clone())?;
    let mut optim = Optim::new(&model, plan)?;
    let steps = samples.len().div_ceil(plan.batch_size);
    let match_w = config.loss.match_weights();
    let mut loss_log = Vec::with_capacity(plan.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..plan.epochs {
        let mut rng = rng_for(plan.seed ^ STUDENT_STREAM, epoch as u64);
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for (step, chunk) in order.chunks(plan.batch_size).enumerate() {
            let mut images = Vec::with_capacity(chunk.len());
            let mut flips = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &samples[i];
                let flip = plan.hflip && rng.random_bool(0.5);
                images.push(s.image);
                flips.push(flip);
                targets.push(if flip {
                    s.targets.iter().map(|(c, b)| (*c, b.hflipped())).collect()
                } else {
                    s.targets.clone()
                });
            }
            let n_targets: usize = targets.iter().map(Vec::len).sum();
            let norm = n_targets.max(1) as f64;
            let x = model.image_tensor(&images, &flips)?;
            let outs = model.set_forward_train(&x)?;
            let mut loss = Tensor::zeros((), DType::F32, &dev_of(&model))?;
            let mut last = 0.0;
            for (logits, boxes) in &outs {
                let probs: Vec<Vec<Vec<f32>>> = candle_nn::ops::softmax(logits, D::Minus1)?.to_vec3()?;
                let pred: Vec<Vec<Vec<f32>>> = boxes.to_vec3()?;
                let mut assignments = Vec::with_capacity(chunk.len());
                for ((p, b), t) in probs.iter().zip(&pred).zip(&targets) {
                    let qb: Vec<BBox> = b
                        .iter()
                        .map(|r| BBox::from_corners_clamped(r[0] as f64, r[1] as f64, r[2] as f64, r[3] as f64))
                        .collect();
                    assignments.push(match_targets(p, &qb, t, &match_w)?);
                }
                let l = (batch_set_loss(logits, boxes, &targets, &assignments, &config.loss)? / norm)?;
                last = scalar(&l)?;
                loss = (loss + l)?;
            }
            check_finite("student", epoch, step, last)?;
            optim.step(&loss, plan.lr_at(epoch, step, steps), plan.grad_clip)?;
            sum += last * chunk.len() as f64;
            count += chunk.len();
        }
        let mean = sum / count.max(1) as f64;
        info!("student epoch {}/{}: set loss {mean:.4}", epoch + 1, plan.epochs);
        loss_log.push(mean);
    }
    Ok(Trained {
        model,
        meta: CheckpointMeta {
            epoch: plan.epochs,
            seed: plan.seed,
            loss_log,
        },
    })
}

fn dev_of(model: &Detector) -> candle_core::Device {
    model.device().clone()
}
