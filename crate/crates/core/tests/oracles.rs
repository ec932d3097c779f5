mod common;

use common::coco_reference::reference_eval;
use common::raster_oracle::raster_iou_giou;
use pointq_core::geometry::{giou, iou, BBox};
use pointq_core::metrics::{coco_eval, Detection, EvalParams, GroundTruth};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let (a, b, c, d): (f64, f64, f64, f64) = (rng.random(), rng.random(), rng.random(), rng.random());
    bx(a.min(c), b.min(d), a.max(c), b.max(d))
}

#[test]
fn iou_and_giou_match_raster_estimate() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        let (ri, rg) = raster_iou_giou(&a, &b, 400, &mut rng);
        assert!((iou(&a, &b) - ri).abs() < 5e-3, "{a:?} {b:?}");
        assert!((giou(&a, &b) - rg).abs() < 5e-3, "{a:?} {b:?}");
    }
}

#[test]
fn hand_built_three_gt_four_detections() {
    let gts = vec![
        GroundTruth { image_id: 0, id: 1, bbox: bx(0.0, 0.0, 0.4, 0.4), category: 0 },
        GroundTruth { image_id: 0, id: 2, bbox: bx(0.5, 0.5, 0.9, 0.9), category: 0 },
        GroundTruth { image_id: 0, id: 3, bbox: bx(0.0, 0.6, 0.3, 0.9), category: 0 },
    ];
    let d = |b: BBox, s: f64| Detection { image_id: 0, bbox: b, category: 0, score: s };
    let dets = vec![
        d(bx(0.0, 0.0, 0.4, 0.4), 0.9),   // exact
        d(bx(0.5, 0.5, 0.9, 0.75), 0.8),  // IoU 0.625
        d(bx(0.6, 0.0, 0.9, 0.3), 0.7),   // background
        d(bx(0.0, 0.6, 0.3, 0.9), 0.6),   // exact
    ];
    // thresholds <= 0.6: TP TP FP TP -> precision 1 up to recall 2/3, then 3/4
    let ap_low = (67.0 + 34.0 * 0.75) / 101.0;
    // thresholds >= 0.65: TP FP FP TP -> 1 up to recall 1/3, then 1/2 up to 2/3
    let ap_high = (34.0 + 33.0 * 0.5) / 101.0;
    let expect_ap = (3.0 * ap_low + 7.0 * ap_high) / 10.0;
    let expect_ar100 = (3.0 * 1.0 + 7.0 * (2.0 / 3.0)) / 10.0;

    let r = coco_eval(&dets, &gts, &EvalParams::for_canvas(64));
    assert!((r.ap50 - ap_low).abs() < 1e-12, "{}", r.ap50);
    assert!((r.ap75 - ap_high).abs() < 1e-12, "{}", r.ap75);
    assert!((r.ap - expect_ap).abs() < 1e-12);
    assert!((r.ar100 - expect_ar100).abs() < 1e-12);
    assert!((r.ar10 - expect_ar100).abs() < 1e-12);
    assert!((r.ar1 - 1.0 / 3.0).abs() < 1e-12);

    let reference = reference_eval(&dets, &gts);
    assert!((reference.ap - expect_ap).abs() < 1e-12);
    assert!((reference.ar1 - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn coco_eval_matches_reference_on_random_micro_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..100 {
        let n_gt = rng.random_range(1..=5);
        let n_det = rng.random_range(0..=8);
        let gts: Vec<GroundTruth> = (0..n_gt)
            .map(|i| GroundTruth {
                image_id: rng.random_range(0..2),
                id: i as u64,
                bbox: random_box(&mut rng),
                category: rng.random_range(0..2),
            })
            .collect();
        let dets: Vec<Detection> = (0..n_det)
            .map(|_| {
                // perturb a ground truth half of the time so matches happen
                let bbox = if rng.random_bool(0.5) {
                    let g = gts[rng.random_range(0..gts.len())].bbox;
                    let j = |v: f64, rng: &mut ChaCha8Rng| (v + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0);
                    let (x1, x2) = (j(g.x1, &mut rng), j(g.x2, &mut rng));
                    let (y1, y2) = (j(g.y1, &mut rng), j(g.y2, &mut rng));
                    bx(x1.min(x2), y1.min(y2), x1.max(x2), y1.max(y2))
                } else {
                    random_box(&mut rng)
                };
                Detection {
                    image_id: rng.random_range(0..2),
                    bbox,
                    category: rng.random_range(0..2),
                    score: rng.random(),
                }
            })
            .collect();
        let r = coco_eval(&dets, &gts, &EvalParams::for_canvas(10_000));
        let reference = reference_eval(&dets, &gts);
        for (name, a, b) in [
            ("ap", r.ap, reference.ap),
            ("ap50", r.ap50, reference.ap50),
            ("ap75", r.ap75, reference.ap75),
            ("ar1", r.ar1, reference.ar1),
            ("ar10", r.ar10, reference.ar10),
            ("ar100", r.ar100, reference.ar100),
        ] {
            assert!((a - b).abs() < 1e-12, "trial {trial} {name}: {a} vs {b}");
        }
    }
}
