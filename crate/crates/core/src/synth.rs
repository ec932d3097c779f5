//! Synthetic shape scenes with per-instance masks, point synthesis and the
//! fully/weakly labeled split.
//!
//! Each shape family maps to one category, and each category draws its size
//! and aspect ratio from its own range, so the category alone carries a shape
//! prior. Instances are painted in order: later instances occlude earlier ones.
//!
//! Pixel `(i, j)` covers `[i, i+1) x [j, j+1)`; its center maps to the
//! normalized coordinate `((i + 0.5) / W, (j + 0.5) / H)`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, BBox, PointAnnotation};
use crate::seeding::rng_for;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("scene {scene_id}: could not place {instances} instances after {attempts} attempts")]
    Placement {
        scene_id: u64,
        instances: usize,
        attempts: usize,
    },
    #[error("fraction {fraction} of {total} scenes leaves an empty {side} set")]
    EmptySplit {
        fraction: f64,
        total: usize,
        side: &'static str,
    },
    #[error("fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Triangle,
    Ring,
}

impl ShapeKind {
    /// Inside test in the unit square `[-1, 1]^2` of the placement rectangle.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            ShapeKind::Rectangle => u.abs() <= 1.0 && v.abs() <= 1.0,
            ShapeKind::Ellipse => u * u + v * v <= 1.0,
            ShapeKind::Ring => {
                let r2 = u * u + v * v;
                r2 <= 1.0 && r2 >= RING_INNER * RING_INNER
            }
            // apex at the top center, base along the bottom edge
            ShapeKind::Triangle => v <= 1.0 && v >= -1.0 && u.abs() <= 0.5 * (v + 1.0),
        }
    }
}

const RING_INNER: f64 = 0.55;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub shape: ShapeKind,
    /// Range of `sqrt(w * h) / canvas` for the placement rectangle.
    pub scale: [f64; 2],
    /// Range of `w / h`.
    pub aspect: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub canvas_size: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub categories: Vec<CategorySpec>,
    /// Upper bound on pairwise box IoU between instances of one scene.
    pub max_box_iou: f64,
    /// Each instance keeps at least this fraction of its mask unoccluded.
    pub min_visible_fraction: f64,
    /// Store only the visible part of each mask instead of the full shape.
    pub visible_masks: bool,
    pub background: [f64; 2],
    pub foreground: [f64; 2],
    pub noise_std: f64,
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let cat = |name: &str, shape, scale, aspect| CategorySpec {
            name: name.to_string(),
            shape,
            scale,
            aspect,
        };
        Self {
            canvas_size: 64,
            min_instances: 1,
            max_instances: 5,
            categories: vec![
                cat("rectangle", ShapeKind::Rectangle, [0.14, 0.30], [1.6, 2.6]),
                cat("ellipse", ShapeKind::Ellipse, [0.16, 0.32], [0.4, 0.65]),
                cat("triangle", ShapeKind::Triangle, [0.18, 0.34], [0.9, 1.2]),
                cat("ring", ShapeKind::Ring, [0.24, 0.42], [0.85, 1.15]),
            ],
            max_box_iou: 0.5,
            min_visible_fraction: 0.4,
            visible_masks: false,
            background: [0.0, 0.3],
            foreground: [0.45, 1.0],
            noise_std: 0.05,
            max_attempts: 200,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.categories.len() < 2 {
            return bad("at least two categories are required");
        }
        if self.canvas_size < 32 {
            return bad("canvas_size must be at least 32");
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return bad("need 1 <= min_instances <= max_instances");
        }
        if self.max_instances >= INSTANCE_STRIDE as usize {
            return bad("max_instances must be below 1000");
        }
        for c in &self.categories {
            let ok = c.scale[0] > 0.0
                && c.scale[0] <= c.scale[1]
                && c.aspect[0] > 0.0
                && c.aspect[0] <= c.aspect[1];
            if !ok {
                return Err(SynthError::InvalidConfig(format!(
                    "category {}: scale and aspect ranges must be positive and ordered",
                    c.name
                )));
            }
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive");
        }
        Ok(())
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }
}

/// Binary occupancy grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn get(&self, col: usize, row: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// `(col, row)` of every set cell, row-major.
    pub fn cells(&self) -> Vec<(usize, usize)> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(|(i, _)| (i % self.width, i / self.width))
            .collect()
    }

    /// Tight bounding box over set cells, cell edges in normalized units.
    pub fn tight_box(&self) -> Option<BBox> {
        let cells = self.cells();
        if cells.is_empty() {
            return None;
        }
        let (mut c0, mut r0, mut c1, mut r1) = (usize::MAX, usize::MAX, 0, 0);
        for (c, r) in cells {
            c0 = c0.min(c);
            r0 = r0.min(r);
            c1 = c1.max(c);
            r1 = r1.max(r);
        }
        let w = self.width as f64;
        let h = self.height as f64;
        Some(BBox {
            x1: c0 as f64 / w,
            y1: r0 as f64 / h,
            x2: (c1 + 1) as f64 / w,
            y2: (r1 + 1) as f64 / h,
        })
    }

    pub fn hflipped(&self) -> Self {
        let mut out = Mask::empty(self.width, self.height);
        for r in 0..self.height {
            for c in 0..self.width {
                out.bits[r * self.width + c] = self.get(self.width - 1 - c, r);
            }
        }
        out
    }

    /// COCO-style uncompressed run-length encoding (column-major, starting
    /// with a run of zeros).
    pub fn to_rle(&self) -> Vec<u32> {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for c in 0..self.width {
            for r in 0..self.height {
                let v = self.get(c, r);
                if v != current {
                    counts.push(run);
                    run = 0;
                    current = v;
                }
                run += 1;
            }
        }
        counts.push(run);
        counts
    }

    pub fn from_rle(width: usize, height: usize, counts: &[u32]) -> Option<Self> {
        let total: u64 = counts.iter().map(|&c| c as u64).sum();
        if total != (width * height) as u64 {
            return None;
        }
        let mut mask = Mask::empty(width, height);
        let mut idx = 0usize;
        let mut value = false;
        for &run in counts {
            for _ in 0..run {
                let (c, r) = (idx / height, idx % height);
                mask.bits[r * width + c] = value;
                idx += 1;
            }
            value = !value;
        }
        Some(mask)
    }
}

/// Generator-side description of a rendered shape, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    /// `scene_id * 1000 + index`.
    pub id: u64,
    pub category: usize,
    pub bbox: BBox,
    pub mask: Mask,
    pub shape: ShapeParams,
}

pub const INSTANCE_STRIDE: u64 = 1000;

pub fn instance_id(scene_id: u64, index: usize) -> u64 {
    scene_id * INSTANCE_STRIDE + index as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub canvas_size: usize,
    /// Grayscale intensities, row-major, `canvas_size^2` bytes.
    pub image: Vec<u8>,
    pub instances: Vec<Instance>,
}

impl Scene {
    /// Intensities scaled to `[0, 1]`.
    pub fn pixels_f32(&self) -> Vec<f32> {
        self.image.iter().map(|&p| p as f32 / 255.0).collect()
    }
}

fn rasterize(kind: ShapeKind, p: &ShapeParams, size: usize) -> Mask {
    let mut mask = Mask::empty(size, size);
    let hw = 0.5 * p.w;
    let hh = 0.5 * p.h;
    let c0 = ((p.cx - hw).floor().max(0.0)) as usize;
    let c1 = ((p.cx + hw).ceil() as usize).min(size);
    let r0 = ((p.cy - hh).floor().max(0.0)) as usize;
    let r1 = ((p.cy + hh).ceil() as usize).min(size);
    for r in r0..r1 {
        for c in c0..c1 {
            let u = (c as f64 + 0.5 - p.cx) / hw;
            let v = (r as f64 + 0.5 - p.cy) / hh;
            if kind.contains(u, v) {
                mask.bits[r * size + c] = true;
            }
        }
    }
    mask
}

fn draw_shape(rng: &mut ChaCha8Rng, spec: &CategorySpec, cfg: &SceneConfig) -> ShapeParams {
    let size = cfg.canvas_size as f64;
    let scale = rng.random_range(spec.scale[0]..=spec.scale[1]) * size;
    let aspect = rng.random_range(spec.aspect[0]..=spec.aspect[1]);
    let w = (scale * aspect.sqrt()).clamp(3.0, size - 2.0);
    let h = (scale / aspect.sqrt()).clamp(3.0, size - 2.0);
    let cx = rng.random_range(0.5 * w..=size - 0.5 * w);
    let cy = rng.random_range(0.5 * h..=size - 0.5 * h);
    let intensity = rng.random_range(cfg.foreground[0]..=cfg.foreground[1]);
    ShapeParams {
        cx,
        cy,
        w,
        h,
        intensity,
    }
}

fn visible_fraction_ok(masks: &[Mask], min_fraction: f64) -> bool {
    for (i, m) in masks.iter().enumerate() {
        let total = m.count();
        if total == 0 {
            return false;
        }
        let visible = m
            .bits
            .iter()
            .enumerate()
            .filter(|(k, b)| **b && !masks[i + 1..].iter().any(|o| o.bits[*k]))
            .count();
        if visible == 0 || (visible as f64) < min_fraction * total as f64 {
            return false;
        }
    }
    true
}

/// Renders one scene. Deterministic for a fixed `(seed, scene_id, config)`.
pub fn generate_scene(seed: u64, scene_id: u64, cfg: &SceneConfig) -> Result<Scene, SynthError> {
    cfg.validate()?;
    let mut rng = rng_for(seed, scene_id);
    let size = cfg.canvas_size;
    let n = rng.random_range(cfg.min_instances..=cfg.max_instances);
    let cats: Vec<usize> = (0..n)
        .map(|_| rng.random_range(0..cfg.categories.len()))
        .collect();

    let mut placed: Vec<(ShapeParams, Mask, BBox)> = Vec::new();
    let mut attempts = 0usize;
    'outer: while placed.len() < n {
        let cat = cats[placed.len()];
        let spec = &cfg.categories[cat];
        for _ in 0..cfg.max_attempts {
            attempts += 1;
            let params = draw_shape(&mut rng, spec, cfg);
            let mask = rasterize(spec.shape, &params, size);
            let Some(bbox) = mask.tight_box() else {
                continue;
            };
            if placed.iter().any(|(_, _, b)| iou(b, &bbox) > cfg.max_box_iou) {
                continue;
            }
            let mut masks: Vec<Mask> = placed.iter().map(|(_, m, _)| m.clone()).collect();
            masks.push(mask.clone());
            if !visible_fraction_ok(&masks, cfg.min_visible_fraction) {
                continue;
            }
            placed.push((params, mask, bbox));
            continue 'outer;
        }
        return Err(SynthError::Placement {
            scene_id,
            instances: n,
            attempts,
        });
    }

    // Paint: noisy background, then shapes in order.
    let background = rng.random_range(cfg.background[0]..=cfg.background[1]);
    let mut canvas = vec![background; size * size];
    for (params, mask, _) in &placed {
        for (k, b) in mask.bits.iter().enumerate() {
            if *b {
                canvas[k] = params.intensity;
            }
        }
    }
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("finite std");
    let image = canvas
        .iter()
        .map(|v| {
            let v = v + noise.sample(&mut rng);
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();

    let all_masks: Vec<Mask> = placed.iter().map(|(_, m, _)| m.clone()).collect();
    let mut instances = Vec::with_capacity(n);
    for (idx, (params, mask, bbox)) in placed.into_iter().enumerate() {
        let (mask, bbox) = if cfg.visible_masks {
            let mut visible = mask.clone();
            for later in &all_masks[idx + 1..] {
                for (k, b) in later.bits.iter().enumerate() {
                    if *b {
                        visible.bits[k] = false;
                    }
                }
            }
            let vb = visible.tight_box().expect("visibility checked during placement");
            (visible, vb)
        } else {
            (mask, bbox)
        };
        instances.push(Instance {
            id: instance_id(scene_id, idx),
            category: cats[idx],
            bbox,
            mask,
            shape: params,
        });
    }
    Ok(Scene {
        id: scene_id,
        canvas_size: size,
        image,
        instances,
    })
}

/// Scenes `first_id .. first_id + count`, each with its own RNG stream.
pub fn generate_scenes(
    seed: u64,
    first_id: u64,
    count: usize,
    cfg: &SceneConfig,
) -> Result<Vec<Scene>, SynthError> {
    (0..count as u64)
        .map(|i| generate_scene(seed, first_id + i, cfg))
        .collect()
}

/// Where on an object a synthesized point annotation is placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PointMode {
    /// Uniform over the mask cells (cell centers).
    #[default]
    Mask,
    /// Uniform over the box interior.
    #[serde(rename = "bbox")]
    BBox,
    /// Box center.
    Center,
}

impl std::str::FromStr for PointMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mask" => Ok(PointMode::Mask),
            "bbox" => Ok(PointMode::BBox),
            "center" => Ok(PointMode::Center),
            other => Err(format!("unknown point mode `{other}` (mask|bbox|center)")),
        }
    }
}

impl std::fmt::Display for PointMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PointMode::Mask => "mask",
            PointMode::BBox => "bbox",
            PointMode::Center => "center",
        })
    }
}

pub fn sample_point<R: Rng + ?Sized>(inst: &Instance, mode: PointMode, rng: &mut R) -> PointAnnotation {
    let b = &inst.bbox;
    match mode {
        PointMode::Center => {
            let (x, y) = b.center();
            PointAnnotation::new(x, y, inst.category)
        }
        PointMode::BBox => {
            let x = b.x1 + rng.random::<f64>() * b.width();
            let y = b.y1 + rng.random::<f64>() * b.height();
            PointAnnotation::new(x, y, inst.category)
        }
        PointMode::Mask => {
            let cells = inst.mask.cells();
            let (c, r) = cells[rng.random_range(0..cells.len())];
            PointAnnotation::new(
                (c as f64 + 0.5) / inst.mask.width as f64,
                (r as f64 + 0.5) / inst.mask.height as f64,
                inst.category,
            )
        }
    }
}

/// One annotation point per instance of every scene; scene `s` draws from its
/// own RNG stream so the result does not depend on scene order.
pub fn annotate_points(scenes: &[Scene], mode: PointMode, seed: u64) -> Vec<Vec<PointAnnotation>> {
    scenes
        .iter()
        .map(|s| {
            let mut rng = rng_for(seed, s.id);
            s.instances
                .iter()
                .map(|inst| sample_point(inst, mode, &mut rng))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub full: Vec<u64>,
    pub weak: Vec<u64>,
    pub fraction: f64,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn is_full(&self, id: u64) -> bool {
        self.full.contains(&id)
    }
}

/// Shuffles the ids once and takes a prefix of `round(fraction * n)` as the
/// fully labeled set, so growing the fraction only ever adds scenes.
pub fn split_dataset(scene_ids: &[u64], fraction: f64, seed: u64) -> Result<DatasetSplit, SynthError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(SynthError::InvalidFraction(fraction));
    }
    let total = scene_ids.len();
    let n_full = (fraction * total as f64).round_ties_even() as usize;
    if n_full == 0 {
        return Err(SynthError::EmptySplit {
            fraction,
            total,
            side: "fully labeled",
        });
    }
    if n_full >= total {
        return Err(SynthError::EmptySplit {
            fraction,
            total,
            side: "weakly labeled",
        });
    }
    let mut ids = scene_ids.to_vec();
    ids.sort_unstable();
    let mut rng = rng_for(seed, 0x5_1_17);
    ids.shuffle(&mut rng);
    let mut full = ids[..n_full].to_vec();
    let mut weak = ids[n_full..].to_vec();
    full.sort_unstable();
    weak.sort_unstable();
    Ok(DatasetSplit {
        full,
        weak,
        fraction,
        seed,
    })
}
