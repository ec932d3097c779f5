//! Pseudo-box quality, COCO-style AP/AR and a TIDE-style error breakdown.
//!
//! `coco_eval` follows the pycocotools procedure: per image and category the
//! detections are sorted by score and greedily matched to the best unmatched
//! ground truth at each IoU threshold; precision is interpolated at 101 recall
//! points; categories without ground truth are excluded from the means.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, BBox};
use crate::matcher::{hungarian, CostMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("pseudo-label refers to unknown ground-truth instance {0}")]
    UnknownInstance(u64),
    #[error("ground-truth instance {0} has more than one pseudo-label")]
    DuplicateInstance(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: u64,
    pub id: u64,
    pub bbox: BBox,
    pub category: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub bbox: BBox,
    pub category: usize,
    pub score: f64,
}

/// Mean IoU between each ground-truth instance and its pseudo-box; instances
/// without a pseudo-box contribute `0`.
pub fn pseudo_miou(pseudo: &[(u64, BBox)], ground_truth: &[GroundTruth]) -> Result<f64, MetricsError> {
    if ground_truth.is_empty() {
        return Ok(0.0);
    }
    let gt: HashMap<u64, &GroundTruth> = ground_truth.iter().map(|g| (g.id, g)).collect();
    let mut seen = BTreeSet::new();
    let mut total = 0.0;
    for (id, bbox) in pseudo {
        let g = gt.get(id).ok_or(MetricsError::UnknownInstance(*id))?;
        if !seen.insert(*id) {
            return Err(MetricsError::DuplicateInstance(*id));
        }
        total += iou(bbox, &g.bbox);
    }
    Ok(total / ground_truth.len() as f64)
}

/// Fraction of ground-truth instances that can be paired one-to-one with a
/// same-category box of IoU at least `threshold` (maximum matching per image).
pub fn instance_recall(boxes: &[Detection], ground_truth: &[GroundTruth], threshold: f64) -> f64 {
    if ground_truth.is_empty() {
        return 0.0;
    }
    let mut by_image: BTreeMap<u64, (Vec<&GroundTruth>, Vec<&Detection>)> = BTreeMap::new();
    for g in ground_truth {
        by_image.entry(g.image_id).or_default().0.push(g);
    }
    for d in boxes {
        if let Some(e) = by_image.get_mut(&d.image_id) {
            e.1.push(d);
        }
    }
    let mut hit = 0usize;
    for (gts, dets) in by_image.values() {
        if dets.is_empty() {
            continue;
        }
        let cols = dets.len().max(gts.len());
        let costs = CostMatrix::from_fn(gts.len(), cols, |r, c| {
            match dets.get(c) {
                Some(d) if d.category == gts[r].category && iou(&d.bbox, &gts[r].bbox) >= threshold => -1.0,
                _ => 0.0,
            }
        })
        .expect("finite costs");
        hit += (-hungarian(&costs).total_cost).round() as usize;
    }
    hit as f64 / ground_truth.len() as f64
}

/// Evaluation settings. Areas are in squared pixels of the canvas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    pub iou_thresholds: Vec<f64>,
    pub recall_points: usize,
    pub max_dets: [usize; 3],
    pub canvas_size: usize,
    pub small_area: f64,
    pub medium_area: f64,
}

/// Reference image side used to rescale COCO's 32^2 / 96^2 size buckets.
pub const COCO_REFERENCE_SIDE: f64 = 640.0;

impl EvalParams {
    /// COCO defaults with the size buckets scaled by `canvas / 640`.
    pub fn for_canvas(canvas_size: usize) -> Self {
        let s = canvas_size as f64 / COCO_REFERENCE_SIDE;
        Self {
            iou_thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
            recall_points: 101,
            max_dets: [1, 10, 100],
            canvas_size,
            small_area: (32.0 * s).powi(2),
            medium_area: (96.0 * s).powi(2),
        }
    }

    fn area_ranges(&self) -> [(f64, f64); 4] {
        [
            (0.0, f64::INFINITY),
            (0.0, self.small_area),
            (self.small_area, self.medium_area),
            (self.medium_area, f64::INFINITY),
        ]
    }

    fn pixel_area(&self, b: &BBox) -> f64 {
        b.area() * (self.canvas_size * self.canvas_size) as f64
    }
}

/// COCO summary metrics in `[0, 1]`. Size-bucket entries are `None` when no
/// ground truth falls in the bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub ar1: f64,
    pub ar10: f64,
    pub ar100: f64,
    pub ar_small: Option<f64>,
    pub ar_medium: Option<f64>,
    pub ar_large: Option<f64>,
}

/// Matching outcome of one (image, category, area range).
struct ImageEval {
    /// Scores in descending order (top `max_dets[2]`).
    scores: Vec<f64>,
    /// `matched[t][d]`.
    matched: Vec<Vec<bool>>,
    /// `ignored[t][d]`.
    ignored: Vec<Vec<bool>>,
    /// Number of non-ignored ground truths.
    num_gt: usize,
}

fn evaluate_image(
    dets: &[&Detection],
    gts: &[&GroundTruth],
    range: (f64, f64),
    params: &EvalParams,
) -> ImageEval {
    let outside = |a: f64| a < range.0 || a > range.1;
    // non-ignored ground truths first, stable
    let mut gts: Vec<(&GroundTruth, bool)> = gts
        .iter()
        .map(|g| (*g, outside(params.pixel_area(&g.bbox))))
        .collect();
    gts.sort_by_key(|(_, ig)| *ig);
    let mut dets: Vec<&Detection> = dets.to_vec();
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    dets.truncate(params.max_dets[2]);

    let ious: Vec<Vec<f64>> = dets
        .iter()
        .map(|d| gts.iter().map(|(g, _)| iou(&d.bbox, &g.bbox)).collect())
        .collect();
    let nt = params.iou_thresholds.len();
    let mut matched = vec![vec![false; dets.len()]; nt];
    let mut ignored = vec![vec![false; dets.len()]; nt];
    for (ti, &t) in params.iou_thresholds.iter().enumerate() {
        let mut gt_used = vec![false; gts.len()];
        for (di, d) in dets.iter().enumerate() {
            let mut best = t.min(1.0 - 1e-10);
            let mut m: Option<usize> = None;
            for (gi, (_, g_ignored)) in gts.iter().enumerate() {
                if gt_used[gi] {
                    continue;
                }
                // once a regular match exists, ignored ground truths cannot replace it
                if let Some(mi) = m {
                    if !gts[mi].1 && *g_ignored {
                        break;
                    }
                }
                if ious[di][gi] < best {
                    continue;
                }
                best = ious[di][gi];
                m = Some(gi);
            }
            match m {
                Some(gi) => {
                    gt_used[gi] = true;
                    matched[ti][di] = true;
                    ignored[ti][di] = gts[gi].1;
                }
                None => {
                    ignored[ti][di] = outside(params.pixel_area(&d.bbox));
                }
            }
        }
    }
    ImageEval {
        scores: dets.iter().map(|d| d.score).collect(),
        matched,
        ignored,
        num_gt: gts.iter().filter(|(_, ig)| !ig).count(),
    }
}

/// `(precision[t][r], recall[t])` for one category, area and detection cap,
/// or `None` when no ground truth counts.
fn accumulate(evals: &[&ImageEval], max_det: usize, params: &EvalParams) -> Option<(Vec<Vec<f64>>, Vec<f64>)> {
    let num_gt: usize = evals.iter().map(|e| e.num_gt).sum();
    if num_gt == 0 {
        return None;
    }
    // (score, image order, det index) sorted by descending score, stable
    let mut order: Vec<(f64, usize, usize)> = Vec::new();
    for (ei, e) in evals.iter().enumerate() {
        for di in 0..e.scores.len().min(max_det) {
            order.push((e.scores[di], ei, di));
        }
    }
    order.sort_by(|a, b| b.0.total_cmp(&a.0));
    let recall_thresholds: Vec<f64> = (0..params.recall_points)
        .map(|i| i as f64 / (params.recall_points - 1) as f64)
        .collect();
    let mut precision = Vec::with_capacity(params.iou_thresholds.len());
    let mut recall = Vec::with_capacity(params.iou_thresholds.len());
    for t in 0..params.iou_thresholds.len() {
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut rc = Vec::with_capacity(order.len());
        let mut pr = Vec::with_capacity(order.len());
        for &(_, ei, di) in &order {
            let e = evals[ei];
            if !e.ignored[t][di] {
                if e.matched[t][di] {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
            rc.push(tp as f64 / num_gt as f64);
            pr.push(tp as f64 / ((tp + fp) as f64).max(f64::MIN_POSITIVE));
        }
        recall.push(rc.last().copied().unwrap_or(0.0));
        for i in (1..pr.len()).rev() {
            if pr[i] > pr[i - 1] {
                pr[i - 1] = pr[i];
            }
        }
        let q = recall_thresholds
            .iter()
            .map(|r| {
                let idx = rc.partition_point(|v| v < r);
                pr.get(idx).copied().unwrap_or(0.0)
            })
            .collect();
        precision.push(q);
    }
    Some((precision, recall))
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn coco_eval(detections: &[Detection], ground_truth: &[GroundTruth], params: &EvalParams) -> EvalResult {
    type Key = (usize, u64);
    let mut gts: BTreeMap<Key, Vec<&GroundTruth>> = BTreeMap::new();
    let mut dts: BTreeMap<Key, Vec<&Detection>> = BTreeMap::new();
    for g in ground_truth {
        gts.entry((g.category, g.image_id)).or_default().push(g);
    }
    for d in detections {
        dts.entry((d.category, d.image_id)).or_default().push(d);
    }
    let keys: BTreeSet<Key> = gts.keys().chain(dts.keys()).copied().collect();
    let categories: BTreeSet<usize> = keys.iter().map(|k| k.0).collect();
    let ranges = params.area_ranges();

    // results[area][max_det_index] -> per-category (precision, recall)
    let mut per_area: Vec<Vec<Vec<(Vec<Vec<f64>>, Vec<f64>)>>> = Vec::new();
    for range in ranges {
        let mut evals_by_cat: BTreeMap<usize, Vec<ImageEval>> = BTreeMap::new();
        for key in &keys {
            let d = dts.get(key).map(Vec::as_slice).unwrap_or(&[]);
            let g = gts.get(key).map(Vec::as_slice).unwrap_or(&[]);
            evals_by_cat
                .entry(key.0)
                .or_default()
                .push(evaluate_image(d, g, range, params));
        }
        let mut by_cap = Vec::new();
        for &cap in &params.max_dets {
            let mut cats = Vec::new();
            for c in &categories {
                let evals: Vec<&ImageEval> = evals_by_cat[c].iter().collect();
                if let Some(r) = accumulate(&evals, cap, params) {
                    cats.push(r);
                }
            }
            by_cap.push(cats);
        }
        per_area.push(by_cap);
    }

    let ap = |area: usize, t: Option<usize>| -> Option<f64> {
        let cats = &per_area[area][2];
        mean(cats.iter().flat_map(|(p, _)| {
            p.iter()
                .enumerate()
                .filter(move |(ti, _)| t.is_none_or(|t| t == *ti))
                .flat_map(|(_, row)| row.iter().copied())
        }))
    };
    let ar = |area: usize, cap: usize| -> Option<f64> {
        mean(per_area[area][cap].iter().flat_map(|(_, r)| r.iter().copied()))
    };
    let idx_of = |v: f64| params.iou_thresholds.iter().position(|t| (t - v).abs() < 1e-9);
    EvalResult {
        ap: ap(0, None).unwrap_or(0.0),
        ap50: idx_of(0.5).and_then(|i| ap(0, Some(i))).unwrap_or(0.0),
        ap75: idx_of(0.75).and_then(|i| ap(0, Some(i))).unwrap_or(0.0),
        ap_small: ap(1, None),
        ap_medium: ap(2, None),
        ap_large: ap(3, None),
        ar1: ar(0, 0).unwrap_or(0.0),
        ar10: ar(0, 1).unwrap_or(0.0),
        ar100: ar(0, 2).unwrap_or(0.0),
        ar_small: ar(1, 2),
        ar_medium: ar(2, 2),
        ar_large: ar(3, 2),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ErrorKind {
    Cls,
    Loc,
    Both,
    Dupe,
    Bkg,
    Miss,
}

impl ErrorKind {
    pub const ALL: [ErrorKind; 6] = [
        ErrorKind::Cls,
        ErrorKind::Loc,
        ErrorKind::Both,
        ErrorKind::Dupe,
        ErrorKind::Bkg,
        ErrorKind::Miss,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TideParams {
    pub t_fg: f64,
    pub t_bg: f64,
    pub canvas_size: usize,
}

impl TideParams {
    pub fn for_canvas(canvas_size: usize) -> Self {
        Self {
            t_fg: 0.5,
            t_bg: 0.1,
            canvas_size,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub cls: usize,
    pub loc: usize,
    pub both: usize,
    pub dupe: usize,
    pub bkg: usize,
    pub miss: usize,
}

impl ErrorCounts {
    fn bump(&mut self, kind: ErrorKind) {
        match kind {
            ErrorKind::Cls => self.cls += 1,
            ErrorKind::Loc => self.loc += 1,
            ErrorKind::Both => self.both += 1,
            ErrorKind::Dupe => self.dupe += 1,
            ErrorKind::Bkg => self.bkg += 1,
            ErrorKind::Miss => self.miss += 1,
        }
    }

    pub fn false_positive_total(&self) -> usize {
        self.cls + self.loc + self.both + self.dupe + self.bkg
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorDeltas {
    pub cls: f64,
    pub loc: f64,
    pub both: f64,
    pub dupe: f64,
    pub bkg: f64,
    pub miss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorProfile {
    pub counts: ErrorCounts,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// Unmatched ground truths that some Cls/Loc/Both error points at.
    pub covered_false_negatives: usize,
    /// AP50 at `t_fg` before any fix.
    pub base_ap: f64,
    /// AP gained by fixing each error kind alone.
    pub delta_ap: ErrorDeltas,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Outcome {
    TruePositive(usize),
    Error(ErrorKind, Option<usize>),
}

/// Classifies every detection (by index into `detections`) and returns the
/// indices of missed ground truths.
fn classify(detections: &[Detection], gts: &[GroundTruth], params: &TideParams) -> (Vec<Outcome>, Vec<usize>) {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));
    let mut gt_used = vec![false; gts.len()];
    let mut outcomes = vec![Outcome::Error(ErrorKind::Bkg, None); detections.len()];
    for &di in &order {
        let d = &detections[di];
        let mut best: Option<(usize, f64)> = None;
        let mut same: Option<(usize, f64)> = None;
        let mut other: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if g.image_id != d.image_id {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox);
            let slot = if g.category == d.category { &mut same } else { &mut other };
            if slot.is_none_or(|(_, b)| v > b) {
                *slot = Some((gi, v));
            }
            if g.category == d.category && !gt_used[gi] && v >= params.t_fg && best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            gt_used[gi] = true;
            outcomes[di] = Outcome::TruePositive(gi);
            continue;
        }
        let (s_idx, s_iou) = same.map_or((None, 0.0), |(i, v)| (Some(i), v));
        let (o_idx, o_iou) = other.map_or((None, 0.0), |(i, v)| (Some(i), v));
        outcomes[di] = if s_iou >= params.t_fg {
            Outcome::Error(ErrorKind::Dupe, s_idx)
        } else if o_iou >= params.t_fg {
            Outcome::Error(ErrorKind::Cls, o_idx)
        } else if s_iou >= params.t_bg {
            Outcome::Error(ErrorKind::Loc, s_idx)
        } else if o_iou >= params.t_bg {
            Outcome::Error(ErrorKind::Both, o_idx)
        } else {
            Outcome::Error(ErrorKind::Bkg, None)
        };
    }
    let covered: BTreeSet<usize> = outcomes
        .iter()
        .filter_map(|o| match o {
            Outcome::Error(ErrorKind::Cls | ErrorKind::Loc | ErrorKind::Both, Some(gi)) => Some(*gi),
            _ => None,
        })
        .collect();
    let missed = (0..gts.len())
        .filter(|gi| !gt_used[*gi] && !covered.contains(gi))
        .collect();
    (outcomes, missed)
}

fn ap_at(detections: &[Detection], gts: &[GroundTruth], params: &TideParams) -> f64 {
    let eval = EvalParams {
        iou_thresholds: vec![params.t_fg],
        ..EvalParams::for_canvas(params.canvas_size)
    };
    coco_eval(detections, gts, &eval).ap
}

fn apply_fix(
    kind: ErrorKind,
    detections: &[Detection],
    gts: &[GroundTruth],
    outcomes: &[Outcome],
    missed: &[usize],
) -> (Vec<Detection>, Vec<GroundTruth>) {
    if kind == ErrorKind::Miss {
        let drop: BTreeSet<usize> = missed.iter().copied().collect();
        let kept = gts
            .iter()
            .enumerate()
            .filter(|(i, _)| !drop.contains(i))
            .map(|(_, g)| *g)
            .collect();
        return (detections.to_vec(), kept);
    }
    let mut used: BTreeSet<usize> = outcomes
        .iter()
        .filter_map(|o| match o {
            Outcome::TruePositive(gi) => Some(*gi),
            _ => None,
        })
        .collect();
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));
    let mut out = Vec::with_capacity(detections.len());
    for di in order {
        let d = detections[di];
        match outcomes[di] {
            Outcome::Error(k, target) if k == kind => match (k, target) {
                (ErrorKind::Cls, Some(gi)) if used.insert(gi) => out.push(Detection {
                    category: gts[gi].category,
                    ..d
                }),
                (ErrorKind::Loc, Some(gi)) if used.insert(gi) => out.push(Detection {
                    bbox: gts[gi].bbox,
                    ..d
                }),
                _ => {}
            },
            _ => out.push(d),
        }
    }
    (out, gts.to_vec())
}

/// Error breakdown of `detections`. Every false positive lands in exactly one
/// of Cls/Loc/Both/Dupe/Bkg (checked before returning), every unmatched ground
/// truth not explained by a Cls/Loc/Both error is a Miss.
pub fn tide_diagnose(detections: &[Detection], ground_truth: &[GroundTruth], params: &TideParams) -> ErrorProfile {
    let (outcomes, missed) = classify(detections, ground_truth, params);
    let mut counts = ErrorCounts::default();
    let mut tp = 0usize;
    let mut matched = BTreeSet::new();
    let mut covered = BTreeSet::new();
    for o in &outcomes {
        match o {
            Outcome::TruePositive(gi) => {
                tp += 1;
                matched.insert(*gi);
            }
            Outcome::Error(k, target) => {
                counts.bump(*k);
                if let (ErrorKind::Cls | ErrorKind::Loc | ErrorKind::Both, Some(gi)) = (k, target) {
                    covered.insert(*gi);
                }
            }
        }
    }
    for _ in &missed {
        counts.bump(ErrorKind::Miss);
    }
    let fp = detections.len() - tp;
    let fn_ = ground_truth.len() - matched.len();
    let covered_fn = covered.difference(&matched).count();
    assert_eq!(counts.false_positive_total(), fp, "false positives must partition");
    assert_eq!(counts.miss + covered_fn, fn_, "false negatives must partition");

    let base_ap = ap_at(detections, ground_truth, params);
    let delta = |kind| {
        let (d, g) = apply_fix(kind, detections, ground_truth, &outcomes, &missed);
        ap_at(&d, &g, params) - base_ap
    };
    ErrorProfile {
        counts,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        covered_false_negatives: covered_fn,
        base_ap,
        delta_ap: ErrorDeltas {
            cls: delta(ErrorKind::Cls),
            loc: delta(ErrorKind::Loc),
            both: delta(ErrorKind::Both),
            dupe: delta(ErrorKind::Dupe),
            bkg: delta(ErrorKind::Bkg),
            miss: delta(ErrorKind::Miss),
        },
    }
}
