//! Autograd of decode + box loss against central finite differences of the
//! scalar geometry path.

use candle_core::{DType, Device, Tensor, Var};
use pointq_core::geometry::{decode_offsets, BBox, OffsetQuad, PointAnnotation};
use pointq_model::{box_loss, box_loss_tensor, decode_head_output, Regression};
use rand::Rng;

pub const L1: f64 = 5.0;
pub const GIOU: f64 = 2.0;

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Scalar route: logistic squash, geometry decode, scalar loss.
pub fn scalar_objective(z: [f64; 4], p: &PointAnnotation, target: &BBox) -> f64 {
    let q = OffsetQuad::new(sigmoid(z[0]), sigmoid(z[1]), sigmoid(z[2]), sigmoid(z[3])).unwrap();
    box_loss(&decode_offsets(p, &q), target, L1, GIOU)
}

pub fn autograd(z: [f64; 4], p: &PointAnnotation, target: &BBox) -> [f64; 4] {
    let dev = Device::Cpu;
    let raw = Var::from_tensor(&Tensor::from_vec(z.to_vec(), (1, 4), &dev).unwrap()).unwrap();
    let pts = Tensor::from_vec(vec![p.x, p.y], (1, 2), &dev).unwrap();
    let tgt = Tensor::from_vec(target.as_array().to_vec(), (1, 4), &dev).unwrap();
    let boxes = decode_head_output(raw.as_tensor(), &pts, Regression::Relative).unwrap();
    assert_eq!(boxes.dtype(), DType::F64);
    let loss = box_loss_tensor(&boxes, &tgt, L1, GIOU).unwrap().sum_all().unwrap();
    let g = loss.backward().unwrap();
    let v: Vec<f64> = g.get(raw.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    [v[0], v[1], v[2], v[3]]
}

pub fn finite_difference(z: [f64; 4], p: &PointAnnotation, target: &BBox, h: f64) -> [f64; 4] {
    let mut out = [0.0; 4];
    for i in 0..4 {
        let (mut a, mut b) = (z, z);
        a[i] += h;
        b[i] -= h;
        out[i] = (scalar_objective(a, p, target) - scalar_objective(b, p, target)) / (2.0 * h);
    }
    out
}

/// A configuration away from every kink: no clamping, no coordinate ties
/// between prediction and target, no tie inside intersection or enclosure.
pub fn sample_config<R: Rng>(rng: &mut R) -> ([f64; 4], PointAnnotation, BBox) {
    const M: f64 = 0.02;
    loop {
        let p = PointAnnotation::new(rng.random_range(0.3..0.7), rng.random_range(0.3..0.7), 0);
        let z: [f64; 4] = std::array::from_fn(|_| rng.random_range(-3.0..-0.5));
        let s: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
        let pred = [p.x - s[0], p.y - s[1], p.x + s[2], p.y + s[3]];
        if pred.iter().any(|&v| v < M || v > 1.0 - M) {
            continue;
        }
        let (a, b, c, d): (f64, f64, f64, f64) = (rng.random(), rng.random(), rng.random(), rng.random());
        let target = [a.min(c), b.min(d), a.max(c), b.max(d)];
        let far = |x: f64, y: f64| (x - y).abs() > M;
        let ok = (0..4).all(|i| far(pred[i], target[i]))
            && far(pred[0], target[2])
            && far(pred[2], target[0])
            && far(pred[1], target[3])
            && far(pred[3], target[1])
            && target[2] - target[0] > M
            && target[3] - target[1] > M;
        if ok {
            return (z, p, BBox::new(target[0], target[1], target[2], target[3]).unwrap());
        }
    }
}

/// `|a - n| / max(|a|, |n|)` in the Euclidean norm.
pub fn relative_error(a: &[f64; 4], n: &[f64; 4]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
