//! Box decoding and the box / set-prediction losses, in scalar `f64` form and
//! as differentiable tensor expressions.

use candle_core::{DType, Tensor, D};
use pointq_core::geometry::{giou, BBox};
use pointq_core::matcher::{hungarian, Assignment, CostMatrix, MatchWeights};
use serde::{Deserialize, Serialize};

use crate::error::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub l1: f64,
    pub giou: f64,
    pub class: f64,
    /// Relative weight of the no-object class in the classification term.
    pub no_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 5.0,
            giou: 2.0,
            class: 1.0,
            no_object: 0.1,
        }
    }
}

impl LossWeights {
    pub fn match_weights(&self) -> MatchWeights {
        MatchWeights {
            class: self.class,
            l1: self.l1,
            giou: self.giou,
        }
    }
}

/// `l1 * sum |pred - target| + giou_w * (1 - giou(pred, target))`.
pub fn box_loss(pred: &BBox, target: &BBox, l1: f64, giou_w: f64) -> f64 {
    let dist: f64 = pred
        .as_array()
        .iter()
        .zip(target.as_array())
        .map(|(a, b)| (a - b).abs())
        .sum();
    l1 * dist + giou_w * (1.0 - giou(pred, target))
}

fn col(t: &Tensor, i: usize) -> candle_core::Result<Tensor> {
    t.narrow(1, i, 1)?.squeeze(1)
}

/// Row-wise GIoU of two `(N, 4)` corner tensors.
pub fn giou_tensor(a: &Tensor, b: &Tensor) -> candle_core::Result<Tensor> {
    let (ax1, ay1, ax2, ay2) = (col(a, 0)?, col(a, 1)?, col(a, 2)?, col(a, 3)?);
    let (bx1, by1, bx2, by2) = (col(b, 0)?, col(b, 1)?, col(b, 2)?, col(b, 3)?);
    let area_a = ((&ax2 - &ax1)? * (&ay2 - &ay1)?)?;
    let area_b = ((&bx2 - &bx1)? * (&by2 - &by1)?)?;
    let iw = (ax2.minimum(&bx2)? - ax1.maximum(&bx1)?)?.relu()?;
    let ih = (ay2.minimum(&by2)? - ay1.maximum(&by1)?)?.relu()?;
    let inter = (iw * ih)?;
    let union = ((area_a + area_b)? - &inter)?;
    let iou = (inter / union.maximum(1e-12)?)?;
    let cw = (ax2.maximum(&bx2)? - ax1.minimum(&bx1)?)?;
    let ch = (ay2.maximum(&by2)? - ay1.minimum(&by1)?)?;
    let enclosing = (cw * ch)?;
    iou - ((&enclosing - union)? / enclosing.maximum(1e-12)?)?
}

/// Row-wise [`box_loss`] of two `(N, 4)` corner tensors, shape `(N,)`.
pub fn box_loss_tensor(pred: &Tensor, target: &Tensor, l1: f64, giou_w: f64) -> candle_core::Result<Tensor> {
    let dist = (pred - target)?.abs()?.sum(D::Minus1)?;
    let g = giou_tensor(pred, target)?;
    (dist * l1)? + ((g.neg()? + 1.0)? * giou_w)?
}

/// `(x - l, y - t, x + r, y + b)` clamped to the canvas; `points (N, 2)`,
/// `offsets (N, 4)`.
pub fn decode_offsets_tensor(points: &Tensor, offsets: &Tensor) -> candle_core::Result<Tensor> {
    let lo = (points - offsets.narrow(1, 0, 2)?)?;
    let hi = (points + offsets.narrow(1, 2, 2)?)?;
    Tensor::cat(&[lo, hi], 1)?.clamp(0.0, 1.0)
}

/// `(cx, cy, w, h)` to clamped corners, `(N, 4)`.
pub fn cxcywh_to_corners_tensor(b: &Tensor) -> candle_core::Result<Tensor> {
    let c = b.narrow(1, 0, 2)?;
    let half = (b.narrow(1, 2, 2)? * 0.5)?;
    Tensor::cat(&[(&c - &half)?, (&c + &half)?], 1)?.clamp(0.0, 1.0)
}

fn check_assignment(
    queries: usize,
    targets: &[(usize, BBox)],
    assignment: &Assignment,
    num_classes: usize,
) -> Result<(), ModelError> {
    if assignment.row_to_col.len() != targets.len() {
        return Err(ModelError::InvalidAssignment(format!(
            "{} rows for {} targets",
            assignment.row_to_col.len(),
            targets.len()
        )));
    }
    let mut seen = vec![false; queries];
    for &c in &assignment.row_to_col {
        if c >= queries || seen[c] {
            return Err(ModelError::InvalidAssignment(format!(
                "query {c} out of range or used twice"
            )));
        }
        seen[c] = true;
    }
    if let Some(t) = targets.iter().find(|t| t.0 >= num_classes) {
        return Err(ModelError::CategoryOutOfRange {
            category: t.0,
            num_categories: num_classes,
        });
    }
    Ok(())
}

/// Summed set-prediction loss for a batch.
///
/// `logits (B, Q, C + 1)` with the no-object class last, `boxes (B, Q, 4)`
/// corners, one target list and one assignment per image.
pub fn batch_set_loss(
    logits: &Tensor,
    boxes: &Tensor,
    targets: &[Vec<(usize, BBox)>],
    assignments: &[Assignment],
    w: &LossWeights,
) -> Result<Tensor, ModelError> {
    let (b, q, k) = logits.dims3()?;
    let num_classes = k - 1;
    if targets.len() != b || assignments.len() != b {
        return Err(ModelError::InvalidAssignment(format!(
            "batch of {b} with {} target lists and {} assignments",
            targets.len(),
            assignments.len()
        )));
    }
    let mut class_idx = vec![num_classes as u32; b * q];
    let mut class_w = vec![w.no_object; b * q];
    let mut matched = Vec::new();
    let mut target_boxes = Vec::new();
    for (i, (t, a)) in targets.iter().zip(assignments).enumerate() {
        check_assignment(q, t, a, num_classes)?;
        for ((cat, bbox), &c) in t.iter().zip(&a.row_to_col) {
            class_idx[i * q + c] = *cat as u32;
            class_w[i * q + c] = 1.0;
            matched.push((i * q + c) as u32);
            target_boxes.extend(bbox.as_array());
        }
    }
    let dev = logits.device();
    let dtype = logits.dtype();
    let logp = candle_nn::ops::log_softmax(&logits.reshape((b * q, k))?, D::Minus1)?;
    let idx = Tensor::from_vec(class_idx, (b * q, 1), dev)?;
    let cw = Tensor::from_vec(class_w, b * q, dev)?.to_dtype(dtype)?;
    let nll = logp.gather(&idx, 1)?.squeeze(1)?.neg()?;
    let mut total = ((nll * cw)?.sum_all()? * w.class)?;
    if !matched.is_empty() {
        let n = matched.len();
        let sel = Tensor::from_vec(matched, n, dev)?;
        let pred = boxes.reshape((b * q, 4))?.index_select(&sel, 0)?;
        let tgt = Tensor::from_vec(target_boxes, (n, 4), dev)?.to_dtype(dtype)?;
        total = (total + box_loss_tensor(&pred, &tgt, w.l1, w.giou)?.sum_all()?)?;
    }
    Ok(total)
}

/// Set-prediction loss of one image: class NLL plus [`box_loss`] on matched
/// queries, down-weighted no-object NLL on the rest, summed over queries.
pub fn set_loss(
    logits: &Tensor,
    boxes: &Tensor,
    targets: &[(usize, BBox)],
    assignment: &Assignment,
    w: &LossWeights,
) -> Result<Tensor, ModelError> {
    batch_set_loss(
        &logits.unsqueeze(0)?,
        &boxes.unsqueeze(0)?,
        &[targets.to_vec()],
        std::slice::from_ref(assignment),
        w,
    )
}

/// Hungarian assignment of `targets` to queries given detached predictions.
pub fn match_targets(
    probs: &[Vec<f32>],
    boxes: &[BBox],
    targets: &[(usize, BBox)],
    weights: &MatchWeights,
) -> Result<Assignment, ModelError> {
    if targets.len() > boxes.len() {
        return Err(ModelError::TooManyTargets {
            targets: targets.len(),
            queries: boxes.len(),
        });
    }
    let costs = CostMatrix::from_fn(targets.len(), boxes.len(), |r, c| {
        let (cat, tb) = &targets[r];
        pointq_core::matcher::match_cost(probs[c][*cat] as f64, &boxes[c], tb, weights)
    })
    .map_err(|e| ModelError::InvalidAssignment(e.to_string()))?;
    Ok(hungarian(&costs))
}

pub(crate) fn tensor_to_boxes(t: &Tensor) -> candle_core::Result<Vec<BBox>> {
    let rows: Vec<Vec<f64>> = t.to_dtype(DType::F64)?.to_vec2()?;
    Ok(rows
        .into_iter()
        .map(|r| BBox::from_corners_clamped(r[0], r[1], r[2], r[3]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn boxes_tensor(b: &[BBox]) -> Tensor {
        let v: Vec<f64> = b.iter().flat_map(|b| b.as_array()).collect();
        Tensor::from_vec(v, (b.len(), 4), &Device::Cpu).unwrap()
    }

    #[test]
    fn box_loss_examples() {
        let a = bx(0.0, 0.0, 0.5, 0.5);
        assert_eq!(box_loss(&a, &a, 5.0, 2.0), 0.0);
        let b = bx(0.1, 0.0, 0.6, 0.5);
        let expect_l1 = 5.0 * 0.2;
        let expect = expect_l1 + 2.0 * (1.0 - giou(&a, &b));
        assert!((box_loss(&a, &b, 5.0, 2.0) - expect).abs() < 1e-12);
        assert!((box_loss(&a, &b, 5.0, 0.0) - 1.0).abs() < 1e-12);
        let doubled = box_loss(&a, &b, 10.0, 0.0);
        assert!((doubled - 2.0 * box_loss(&a, &b, 5.0, 0.0)).abs() < 1e-12);
    }

    #[test]
    fn tensor_loss_matches_scalar() {
        let p = [bx(0.0, 0.0, 0.5, 0.5), bx(0.2, 0.1, 0.4, 0.9), bx(0.0, 0.0, 0.1, 0.1)];
        let t = [bx(0.1, 0.0, 0.6, 0.5), bx(0.2, 0.1, 0.4, 0.9), bx(0.9, 0.9, 1.0, 1.0)];
        let got: Vec<f64> = box_loss_tensor(&boxes_tensor(&p), &boxes_tensor(&t), 5.0, 2.0)
            .unwrap()
            .to_vec1()
            .unwrap();
        for i in 0..3 {
            assert!((got[i] - box_loss(&p[i], &t[i], 5.0, 2.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_matches_geometry() {
        let pts = Tensor::from_vec(vec![0.5f64, 0.5, 0.0, 0.0], (2, 2), &Device::Cpu).unwrap();
        let off = Tensor::from_vec(vec![0.1f64, 0.2, 0.1, 0.2, 0.5, 0.5, 0.3, 0.3], (2, 4), &Device::Cpu).unwrap();
        let got: Vec<Vec<f64>> = decode_offsets_tensor(&pts, &off).unwrap().to_vec2().unwrap();
        let expect = [[0.4, 0.3, 0.6, 0.7], [0.0, 0.0, 0.3, 0.3]];
        for (g, e) in got.iter().zip(expect) {
            for (a, b) in g.iter().zip(e) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    fn logits_for(q: usize, hot: &[(usize, usize)], k: usize) -> Tensor {
        // confident logits: class `c` on query `i`, no-object elsewhere
        let mut v = vec![0f64; q * k];
        for i in 0..q {
            v[i * k + k - 1] = 30.0;
        }
        for &(i, c) in hot {
            v[i * k + k - 1] = 0.0;
            v[i * k + c] = 30.0;
        }
        Tensor::from_vec(v, (q, k), &Device::Cpu).unwrap()
    }

    #[test]
    fn set_loss_cases() {
        let w = LossWeights::default();
        let boxes = [bx(0.1, 0.1, 0.3, 0.3), bx(0.5, 0.5, 0.9, 0.9), bx(0.0, 0.0, 1.0, 1.0)];
        let bt = boxes_tensor(&boxes);
        // zero targets: only no-object terms
        let uniform = Tensor::zeros((3, 3), DType::F64, &Device::Cpu).unwrap();
        let empty = Assignment { row_to_col: vec![], total_cost: 0.0 };
        let l = set_loss(&uniform, &bt, &[], &empty, &w).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - 3.0 * 0.1 * 3f64.ln()).abs() < 1e-9);

        // perfect predictions: near-zero loss
        let targets = vec![(1usize, boxes[1])];
        let a = Assignment { row_to_col: vec![1], total_cost: 0.0 };
        let l = set_loss(&logits_for(3, &[(1, 1)], 3), &bt, &targets, &a, &w)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(l < 1e-9, "{l}");

        // moving the matched box toward its target lowers the loss
        let target = bx(0.5, 0.5, 0.9, 0.9);
        let start = bx(0.1, 0.1, 0.3, 0.3);
        let mut prev = f64::INFINITY;
        for s in 0..=10 {
            let f = s as f64 / 10.0;
            let lerp = |a: f64, b: f64| a + (b - a) * f;
            let moved = BBox::new(lerp(start.x1, target.x1), lerp(start.y1, target.y1), lerp(start.x2, target.x2), lerp(start.y2, target.y2)).unwrap();
            let bt = boxes_tensor(&[moved, boxes[1], boxes[2]]);
            let l = set_loss(&logits_for(3, &[(0, 1)], 3), &bt, &[(1, target)], &Assignment { row_to_col: vec![0], total_cost: 0.0 }, &w)
                .unwrap()
                .to_scalar::<f64>()
                .unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn set_loss_rejects_bad_assignment() {
        let w = LossWeights::default();
        let bt = boxes_tensor(&[bx(0.0, 0.0, 0.5, 0.5); 2]);
        let logits = Tensor::zeros((2, 3), DType::F64, &Device::Cpu).unwrap();
        let t = vec![(0, bx(0.0, 0.0, 0.5, 0.5)), (1, bx(0.0, 0.0, 0.5, 0.5))];
        let dup = Assignment { row_to_col: vec![1, 1], total_cost: 0.0 };
        assert!(matches!(set_loss(&logits, &bt, &t, &dup, &w), Err(ModelError::InvalidAssignment(_))));
        let short = Assignment { row_to_col: vec![0], total_cost: 0.0 };
        assert!(set_loss(&logits, &bt, &t, &short, &w).is_err());
        let oob = Assignment { row_to_col: vec![0, 2], total_cost: 0.0 };
        assert!(set_loss(&logits, &bt, &t, &oob, &w).is_err());
    }

    #[test]
    fn batch_loss_is_sum_of_image_losses() {
        let w = LossWeights::default();
        let logits = Tensor::from_vec((0..18).map(|i| (i as f64 * 0.7).sin()).collect::<Vec<_>>(), (2, 3, 3), &Device::Cpu).unwrap();
        let boxes = Tensor::from_vec((0..24).map(|i| [0.1, 0.2, 0.6, 0.7][i % 4] + 0.01 * (i / 4) as f64).collect::<Vec<_>>(), (2, 3, 4), &Device::Cpu).unwrap();
        let targets = vec![vec![(0, bx(0.1, 0.1, 0.5, 0.5))], vec![(1, bx(0.2, 0.2, 0.9, 0.6)), (0, bx(0.0, 0.0, 0.3, 0.3))]];
        let assign = vec![
            Assignment { row_to_col: vec![2], total_cost: 0.0 },
            Assignment { row_to_col: vec![0, 1], total_cost: 0.0 },
        ];
        let total = batch_set_loss(&logits, &boxes, &targets, &assign, &w).unwrap().to_scalar::<f64>().unwrap();
        let mut sum = 0.0;
        for i in 0..2 {
            sum += set_loss(&logits.get(i).unwrap(), &boxes.get(i).unwrap(), &targets[i], &assign[i], &w)
                .unwrap()
                .to_scalar::<f64>()
                .unwrap();
        }
        assert!((total - sum).abs() < 1e-9);
    }

    #[test]
    fn matching_prefers_overlapping_query() {
        let probs = vec![vec![0.5f32, 0.5, 0.0], vec![0.5, 0.5, 0.0]];
        let boxes = [bx(0.0, 0.0, 0.2, 0.2), bx(0.5, 0.5, 0.9, 0.9)];
        let a = match_targets(&probs, &boxes, &[(0, bx(0.5, 0.5, 0.9, 0.9))], &MatchWeights::default()).unwrap();
        assert_eq!(a.row_to_col, vec![1]);
        let too_many = vec![(0, boxes[0]); 3];
        assert!(match_targets(&probs, &boxes, &too_many, &MatchWeights::default()).is_err());
    }
}
