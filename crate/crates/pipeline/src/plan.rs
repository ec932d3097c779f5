use serde::{Deserialize, Serialize};

use crate::error::PipelineError;

/// Optimization schedule: linear warmup, then step decay by 10x at each
/// milestone epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainPlan {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub milestones: Vec<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables it.
    pub grad_clip: f64,
    pub hflip: bool,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self::desk(60)
    }
}

impl TrainPlan {
    /// Milestones at 2/3 and 8/9 of the run.
    pub fn desk(epochs: usize) -> Self {
        let m1 = (epochs * 2).div_ceil(3);
        let m2 = (epochs * 8).div_ceil(9);
        let mut milestones = vec![m1];
        if m2 > m1 && m2 < epochs {
            milestones.push(m2);
        }
        milestones.retain(|&m| m > 0 && m < epochs);
        Self {
            epochs,
            warmup_epochs: 1.min(epochs),
            milestones,
            batch_size: 8,
            lr: 5e-4,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            hflip: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Plan(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return bad("lr must be positive; weight_decay and grad_clip non-negative");
        }
        if self.warmup_epochs > self.epochs {
            return bad("warmup_epochs exceeds epochs");
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad("milestones must be strictly increasing");
        }
        if self.milestones.iter().any(|&m| m >= self.epochs) {
            return bad("milestones must be below epochs");
        }
        Ok(())
    }

    /// Learning rate for `step` (0-based) of `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize, step: usize, steps_per_epoch: usize) -> f64 {
        let decays = self.milestones.iter().filter(|&&m| epoch >= m).count();
        let base = self.lr * 0.1f64.powi(decays as i32);
        if epoch < self.warmup_epochs {
            let done = (epoch * steps_per_epoch + step + 1) as f64;
            base * done / (self.warmup_epochs * steps_per_epoch) as f64
        } else {
            base
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_milestones() {
        let p = TrainPlan::desk(60);
        assert_eq!(p.milestones, vec![40, 54]);
        p.validate().unwrap();
        TrainPlan::desk(1).validate().unwrap();
        TrainPlan::desk(3).validate().unwrap();
    }

    #[test]
    fn schedule_shape() {
        let p = TrainPlan { lr: 1.0, ..TrainPlan::desk(9) };
        assert_eq!(p.milestones, vec![6, 8]);
        assert!((p.lr_at(0, 0, 4) - 0.25).abs() < 1e-12);
        assert!((p.lr_at(0, 3, 4) - 1.0).abs() < 1e-12);
        assert_eq!(p.lr_at(5, 0, 4), 1.0);
        assert!((p.lr_at(6, 0, 4) - 0.1).abs() < 1e-12);
        assert!((p.lr_at(8, 2, 4) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_plans() {
        let mut p = TrainPlan::desk(10);
        p.milestones = vec![5, 5];
        assert!(p.validate().is_err());
        p.milestones = vec![10];
        assert!(p.validate().is_err());
        p.milestones = vec![];
        p.batch_size = 0;
        assert!(p.validate().is_err());
    }
}
