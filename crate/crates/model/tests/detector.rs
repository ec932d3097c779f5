use pointq_core::geometry::PointAnnotation;
use pointq_core::synth::{generate_scene, SceneConfig};
use pointq_model::{
    load_checkpoint, save_checkpoint, CheckpointMeta, Detector, DetectorMode, ModelConfig, ModelError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(mode: DetectorMode) -> ModelConfig {
    ModelConfig {
        mode,
        backbone_channels: vec![4, 8, 8, 16],
        d_model: 16,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 2,
        ffn_dim: 32,
        num_queries: 7,
        ..ModelConfig::default()
    }
}

fn image(seed: u64) -> Vec<u8> {
    generate_scene(seed, 0, &SceneConfig::default()).unwrap().image
}

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<PointAnnotation> {
    (0..n)
        .map(|_| PointAnnotation::new(rng.random(), rng.random(), rng.random_range(0..4)))
        .collect()
}

#[test]
fn backbone_shape_and_determinism() {
    let m = Detector::new(small(DetectorMode::Point)).unwrap();
    let img = image(1);
    let x = m.image_tensor(&[&img], &[]).unwrap();
    let f = m.backbone_forward(&x).unwrap();
    assert_eq!(f.dims(), &[1, 8, 8, 16]);
    let again = m.backbone_forward(&x).unwrap();
    let a: Vec<f32> = f.flatten_all().unwrap().to_vec1().unwrap();
    let b: Vec<f32> = again.flatten_all().unwrap().to_vec1().unwrap();
    assert_eq!(a, b);
    let zero = vec![0u8; 64 * 64];
    let z: Vec<f32> = m
        .backbone_forward(&m.image_tensor(&[&zero], &[]).unwrap())
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap();
    assert!(z.iter().all(|v| v.is_finite()));
    assert!(matches!(m.image_tensor(&[&[0u8; 10]], &[]), Err(ModelError::ImageSize { .. })));
}

#[test]
fn point_mode_cardinality_and_containment() {
    let m = Detector::new(small(DetectorMode::Point)).unwrap();
    let img = image(2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for n in 0..=50 {
        let pts = random_points(&mut rng, n);
        let out = m.point_detr_forward(&img, &pts).unwrap();
        assert_eq!(out.len(), n);
        for (p, o) in pts.iter().zip(&out) {
            assert!(o.bbox.contains(p.x, p.y), "{p:?} {:?}", o.bbox);
            assert!(o.offsets.is_some());
        }
    }
}

#[test]
fn point_mode_is_permutation_equivariant() {
    let m = Detector::new(small(DetectorMode::Point)).unwrap();
    let img = image(3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..5 {
        let pts = random_points(&mut rng, 6);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let permuted: Vec<_> = perm.iter().map(|&i| pts[i]).collect();
        let a = m.point_detr_forward(&img, &pts).unwrap();
        let b = m.point_detr_forward(&img, &permuted).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            let (x, y) = (a[i].bbox.as_array(), b[j].bbox.as_array());
            for k in 0..4 {
                assert!((x[k] - y[k]).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn padded_batches_match_single_images() {
    let m = Detector::new(small(DetectorMode::Point)).unwrap();
    let (i1, i2) = (image(4), image(5));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (p1, p2) = (random_points(&mut rng, 2), random_points(&mut rng, 5));
    let batch = m.predict_points(&[&i1, &i2], &[p1.clone(), p2.clone()]).unwrap();
    let single = m.point_detr_forward(&i1, &p1).unwrap();
    for (a, b) in batch[0].iter().zip(&single) {
        for (x, y) in a.bbox.as_array().iter().zip(b.bbox.as_array()) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}

#[test]
fn mode_mismatch_is_an_error() {
    let img = image(1);
    let p = Detector::new(small(DetectorMode::Point)).unwrap();
    assert!(matches!(p.detr_forward(&img), Err(ModelError::ModeMismatch { .. })));
    let s = Detector::new(small(DetectorMode::Set)).unwrap();
    let pts = [PointAnnotation::new(0.5, 0.5, 0)];
    assert!(matches!(s.point_detr_forward(&img, &pts), Err(ModelError::ModeMismatch { .. })));
}

#[test]
fn set_mode_outputs() {
    let m = Detector::new(small(DetectorMode::Set)).unwrap();
    let a = m.detr_forward(&image(6)).unwrap();
    let b = m.detr_forward(&image(7)).unwrap();
    assert_eq!(a.len(), 7);
    for q in &a {
        assert_eq!(q.probs.len(), 5);
        assert!((q.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(q.bbox.x1 <= q.bbox.x2 && q.bbox.y1 <= q.bbox.y2);
    }
    assert!(a.iter().zip(&b).any(|(x, y)| x.bbox != y.bbox));
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = ModelConfig { d_model: 18, ..ModelConfig::default() };
    assert!(matches!(Detector::new(bad), Err(ModelError::Config(_))));
    let bad = ModelConfig { canvas_size: 60, ..ModelConfig::default() };
    assert!(Detector::new(bad).is_err());
}

#[test]
fn checkpoint_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let img = image(8);
    for mode in [DetectorMode::Point, DetectorMode::Set] {
        let cfg = ModelConfig { init_seed: 5, ..small(mode) };
        let m = Detector::new(cfg.clone()).unwrap();
        let meta = CheckpointMeta { epoch: 3, seed: 11, loss_log: vec![1.5, 1.0, 0.75] };
        let path = dir.path().join(format!("{mode}.safetensors"));
        save_checkpoint(&m, &meta, &path).unwrap();
        let (loaded, meta2) = load_checkpoint(&path).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(loaded.config(), &cfg);
        match mode {
            DetectorMode::Point => {
                let pts = [PointAnnotation::new(0.3, 0.6, 1), PointAnnotation::new(0.7, 0.2, 2)];
                assert_eq!(m.point_detr_forward(&img, &pts).unwrap(), loaded.point_detr_forward(&img, &pts).unwrap());
            }
            DetectorMode::Set => assert_eq!(m.detr_forward(&img).unwrap(), loaded.detr_forward(&img).unwrap()),
        }
        let path2 = dir.path().join("again.safetensors");
        save_checkpoint(&loaded, &meta2, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
    let junk = dir.path().join("junk.safetensors");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    assert!(matches!(load_checkpoint(&junk), Err(ModelError::Checkpoint { .. })));
}

#[test]
fn absolute_regression_ignores_containment() {
    let cfg = ModelConfig { regression: pointq_model::Regression::Absolute, ..small(DetectorMode::Point) };
    let m = Detector::new(cfg).unwrap();
    let pts = [PointAnnotation::new(0.05, 0.05, 0), PointAnnotation::new(0.95, 0.95, 1)];
    let out = m.point_detr_forward(&image(9), &pts).unwrap();
    assert!(out.iter().all(|o| o.offsets.is_none()));
}
