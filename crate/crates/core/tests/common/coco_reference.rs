//! Brute-force COCO reference for the "all areas" metrics.
//!
//! For every score cutoff the matching is recomputed from scratch and the
//! interpolated precision at recall `r` is taken as the maximum precision over
//! all cutoffs reaching recall `r`. No cumulative sums, no monotone sweep and
//! no binary search, so it shares no code path with `coco_eval`.

use std::collections::{BTreeMap, BTreeSet};

use pointq_core::geometry::iou;
use pointq_core::metrics::{Detection, GroundTruth};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceMetrics {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar1: f64,
    pub ar10: f64,
    pub ar100: f64,
}

pub fn thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// True positives among `dets` (already in score order) for one image.
fn greedy_tp(dets: &[&Detection], gts: &[&GroundTruth], t: f64) -> usize {
    let mut used = vec![false; gts.len()];
    let mut tp = 0;
    for d in dets {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            let v = iou(&d.bbox, &g.bbox);
            if !used[gi] && v >= t && best.map_or(true, |(_, b)| v >= b) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            used[gi] = true;
            tp += 1;
        }
    }
    tp
}

/// `(ap, final recall)` for one category at one threshold with a per-image cap.
fn category_pr(dets: &[Detection], gts: &[GroundTruth], t: f64, cap: usize) -> (f64, f64) {
    let mut per_image: BTreeMap<u64, Vec<&Detection>> = BTreeMap::new();
    for d in dets {
        per_image.entry(d.image_id).or_default().push(d);
    }
    let mut kept: Vec<&Detection> = Vec::new();
    for list in per_image.values_mut() {
        list.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        kept.extend(list.iter().take(cap));
    }
    kept.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let n_gt = gts.len() as f64;

    let mut curve: Vec<(f64, f64)> = Vec::new(); // (recall, precision) per cutoff
    for cut in 1..=kept.len() {
        let prefix = &kept[..cut];
        let images: BTreeSet<u64> = prefix.iter().map(|d| d.image_id).collect();
        let mut tp = 0;
        for im in images {
            let ds: Vec<&Detection> = prefix.iter().copied().filter(|d| d.image_id == im).collect();
            let gs: Vec<&GroundTruth> = gts.iter().filter(|g| g.image_id == im).collect();
            tp += greedy_tp(&ds, &gs, t);
        }
        curve.push((tp as f64 / n_gt, tp as f64 / cut as f64));
    }
    let mut ap = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let p = curve
            .iter()
            .filter(|(rc, _)| *rc >= r)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        ap += p;
    }
    let recall = curve.last().map_or(0.0, |c| c.0);
    (ap / 101.0, recall)
}

pub fn reference_eval(dets: &[Detection], gts: &[GroundTruth]) -> ReferenceMetrics {
    let cats: BTreeSet<usize> = gts.iter().map(|g| g.category).collect();
    let ts = thresholds();
    let (mut ap, mut ap50, mut ap75, mut ar1, mut ar10, mut ar100) = (vec![], vec![], vec![], vec![], vec![], vec![]);
    for c in cats {
        let d: Vec<Detection> = dets.iter().copied().filter(|d| d.category == c).collect();
        let g: Vec<GroundTruth> = gts.iter().copied().filter(|g| g.category == c).collect();
        for (ti, &t) in ts.iter().enumerate() {
            let (a, r100) = category_pr(&d, &g, t, 100);
            ap.push(a);
            ar100.push(r100);
            if ti == 0 {
                ap50.push(a);
            }
            if ti == 5 {
                ap75.push(a);
            }
            ar1.push(category_pr(&d, &g, t, 1).1);
            ar10.push(category_pr(&d, &g, t, 10).1);
        }
    }
    let mean = |v: &Vec<f64>| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    ReferenceMetrics {
        ap: mean(&ap),
        ap50: mean(&ap50),
        ap75: mean(&ap75),
        ar1: mean(&ar1),
        ar10: mean(&ar10),
        ar100: mean(&ar100),
    }
}
