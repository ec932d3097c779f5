//! Jittered-raster Monte-Carlo estimate of IoU and GIoU.
//!
//! The enclosing box is cut into an `n x n` grid and one uniform sample is
//! drawn per cell, so only cells straddling a box edge contribute variance.

use pointq_core::geometry::BBox;
use rand::Rng;

pub fn raster_iou_giou<R: Rng>(a: &BBox, b: &BBox, n: usize, rng: &mut R) -> (f64, f64) {
    let c = a.enclosing(b);
    let (cw, ch) = (c.x2 - c.x1, c.y2 - c.y1);
    let (mut inter, mut union) = (0u64, 0u64);
    for i in 0..n {
        for j in 0..n {
            let x = c.x1 + (i as f64 + rng.random::<f64>()) / n as f64 * cw;
            let y = c.y1 + (j as f64 + rng.random::<f64>()) / n as f64 * ch;
            let in_a = x >= a.x1 && x < a.x2 && y >= a.y1 && y < a.y2;
            let in_b = x >= b.x1 && x < b.x2 && y >= b.y1 && y < b.y2;
            inter += (in_a && in_b) as u64;
            union += (in_a || in_b) as u64;
        }
    }
    let total = (n * n) as f64;
    let iou = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
    (iou, iou - (total - union as f64) / total)
}
