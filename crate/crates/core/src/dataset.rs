//! Dataset assembly and the COCO-like on-disk format.
//!
//! An annotation file is a JSON document:
//!
//! ```text
//! {
//!   "info":        { "format": "pointq-coco", "version": 1, "canvas_size": 64,
//!                    "seed": 0, "point_mode": "mask", "scene_config": {...} },
//!   "categories":  [ { "id": 0, "name": "rectangle", "shape": "rectangle" }, ... ],
//!   "images":      [ { "id": 3, "file_name": "images/000003.png", "width": 64, "height": 64 } ],
//!   "annotations": [ { "id": 3001, "image_id": 3, "category_id": 2,
//!                      "bbox": [x, y, w, h],            // pixels
//!                      "area": 123.0,                   // mask cells
//!                      "point": [x, y],                 // pixels, optional
//!                      "segmentation": { "size": [h, w], "counts": [...] },
//!                      "iscrowd": 0,
//!                      "shape": { "cx": .., "cy": .., "w": .., "h": .., "intensity": .. } } ],
//!   "split":       { "fraction": 0.2, "seed": 0, "full": [...], "weak": [...] }   // optional
//! }
//! ```
//!
//! Category ids are zero-based indices into `categories`. Segmentations use
//! COCO's uncompressed, column-major run-length encoding. Images are 8-bit
//! grayscale PNG files referenced relative to the annotation file.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, PointAnnotation};
use crate::synth::{
    annotate_points, generate_scenes, split_dataset, DatasetSplit, Instance, Mask, PointMode,
    Scene, SceneConfig, ShapeKind, ShapeParams, SynthError,
};

pub const FORMAT_NAME: &str = "pointq-coco";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("schema violation in {record}: {message}")]
    Schema { record: String, message: String },
    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error(transparent)]
    Synth(#[from] SynthError),
}

fn schema(record: impl Into<String>, message: impl Into<String>) -> DatasetError {
    DatasetError::Schema {
        record: record.into(),
        message: message.into(),
    }
}

/// Parameters for building a train dataset plus a held-out test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub scene: SceneConfig,
    pub num_scenes: usize,
    pub num_test_scenes: usize,
    /// Share of training scenes that keep their boxes.
    pub fraction: f64,
    pub point_mode: PointMode,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            num_scenes: 2000,
            num_test_scenes: 400,
            fraction: 0.2,
            point_mode: PointMode::Mask,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub scene_config: SceneConfig,
    pub seed: u64,
    pub point_mode: PointMode,
    pub scenes: Vec<Scene>,
    /// `points[s][i]` annotates instance `i` of scene `s`.
    pub points: Vec<Vec<PointAnnotation>>,
    pub split: Option<DatasetSplit>,
}

const POINT_STREAM: u64 = 0x9011_7000;
const TEST_ID_OFFSET: u64 = 1_000_000;

impl Dataset {
    /// Training scenes with points and split.
    pub fn build_train(cfg: &DatasetConfig) -> Result<Self, DatasetError> {
        let scenes = generate_scenes(cfg.seed, 0, cfg.num_scenes, &cfg.scene)?;
        let ids: Vec<u64> = scenes.iter().map(|s| s.id).collect();
        let split = split_dataset(&ids, cfg.fraction, cfg.seed)?;
        Ok(Self::from_scenes(cfg, scenes, Some(split)))
    }

    /// Held-out scenes; ids start at one million so they never collide with
    /// training ids.
    pub fn build_test(cfg: &DatasetConfig) -> Result<Self, DatasetError> {
        let scenes = generate_scenes(cfg.seed, TEST_ID_OFFSET, cfg.num_test_scenes, &cfg.scene)?;
        Ok(Self::from_scenes(cfg, scenes, None))
    }

    fn from_scenes(cfg: &DatasetConfig, scenes: Vec<Scene>, split: Option<DatasetSplit>) -> Self {
        let points = annotate_points(&scenes, cfg.point_mode, cfg.seed ^ POINT_STREAM);
        Self {
            scene_config: cfg.scene.clone(),
            seed: cfg.seed,
            point_mode: cfg.point_mode,
            scenes,
            points,
            split,
        }
    }

    /// Same scenes, points re-synthesized with another placement mode.
    pub fn with_point_mode(&self, mode: PointMode) -> Self {
        let points = annotate_points(&self.scenes, mode, self.seed ^ POINT_STREAM);
        Self {
            point_mode: mode,
            points,
            ..self.clone()
        }
    }

    pub fn scene_index(&self) -> HashMap<u64, usize> {
        self.scenes.iter().enumerate().map(|(i, s)| (s.id, i)).collect()
    }

    pub fn num_categories(&self) -> usize {
        self.scene_config.num_categories()
    }
}

#[derive(Serialize, Deserialize)]
struct InfoRecord {
    format: String,
    version: u32,
    canvas_size: usize,
    seed: u64,
    point_mode: PointMode,
    scene_config: SceneConfig,
}

#[derive(Serialize, Deserialize)]
struct CategoryRecord {
    id: usize,
    name: String,
    shape: ShapeKind,
}

#[derive(Serialize, Deserialize)]
struct ImageRecord {
    id: u64,
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Serialize, Deserialize)]
struct RleRecord {
    size: [usize; 2],
    counts: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationRecord {
    id: u64,
    image_id: u64,
    category_id: usize,
    bbox: Vec<f64>,
    area: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    point: Option<[f64; 2]>,
    segmentation: RleRecord,
    #[serde(default)]
    iscrowd: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shape: Option<ShapeParams>,
}

#[derive(Serialize, Deserialize)]
struct CocoFile {
    info: InfoRecord,
    categories: Vec<CategoryRecord>,
    images: Vec<ImageRecord>,
    annotations: Vec<AnnotationRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<DatasetSplit>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `path` and one PNG per scene under `images/` next to it.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
    let size = ds.scene_config.canvas_size;

    let mut images = Vec::with_capacity(ds.scenes.len());
    let mut annotations = Vec::new();
    for (scene, points) in ds.scenes.iter().zip(&ds.points) {
        let file_name = format!("images/{:07}.png", scene.id);
        let img_path = dir.join(&file_name);
        let buf = image::GrayImage::from_raw(size as u32, size as u32, scene.image.clone())
            .ok_or_else(|| DatasetError::Image {
                path: img_path.clone(),
                message: "pixel buffer does not match canvas".into(),
            })?;
        buf.save(&img_path).map_err(|e| DatasetError::Image {
            path: img_path.clone(),
            message: e.to_string(),
        })?;
        images.push(ImageRecord {
            id: scene.id,
            file_name,
            width: size,
            height: size,
        });
        for (inst, p) in scene.instances.iter().zip(points) {
            annotations.push(AnnotationRecord {
                id: inst.id,
                image_id: scene.id,
                category_id: inst.category,
                bbox: inst.bbox.to_xywh_pixels(size).to_vec(),
                area: inst.mask.count() as f64,
                point: Some([p.x * size as f64, p.y * size as f64]),
                segmentation: RleRecord {
                    size: [size, size],
                    counts: inst.mask.to_rle(),
                },
                iscrowd: 0,
                shape: Some(inst.shape),
            });
        }
    }
    let file = CocoFile {
        info: InfoRecord {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            canvas_size: size,
            seed: ds.seed,
            point_mode: ds.point_mode,
            scene_config: ds.scene_config.clone(),
        },
        categories: ds
            .scene_config
            .categories
            .iter()
            .enumerate()
            .map(|(id, c)| CategoryRecord {
                id,
                name: c.name.clone(),
                shape: c.shape,
            })
            .collect(),
        images,
        annotations,
        split: ds.split.clone(),
    };
    let text = serde_json::to_string(&file).map_err(|source| DatasetError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text).map_err(io_err(path))
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let file: CocoFile = serde_json::from_str(&text).map_err(|source| DatasetError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let info = &file.info;
    if info.format != FORMAT_NAME || info.version != FORMAT_VERSION {
        return Err(schema(
            "info",
            format!("unsupported format {} v{}", info.format, info.version),
        ));
    }
    let size = info.canvas_size;
    if info.scene_config.canvas_size != size {
        return Err(schema("info", "canvas_size disagrees with scene_config"));
    }
    let num_categories = file.categories.len();
    if num_categories != info.scene_config.categories.len() {
        return Err(schema("categories", "count disagrees with scene_config"));
    }
    for (i, c) in file.categories.iter().enumerate() {
        if c.id != i {
            return Err(schema(format!("category {}", c.id), "ids must be 0..C in order"));
        }
    }

    let mut scenes: Vec<Scene> = Vec::with_capacity(file.images.len());
    let mut by_id: HashMap<u64, usize> = HashMap::new();
    for rec in &file.images {
        let record = format!("image {}", rec.id);
        if rec.width != size || rec.height != size {
            return Err(schema(record, "image size differs from canvas"));
        }
        if by_id.insert(rec.id, scenes.len()).is_some() {
            return Err(schema(record, "duplicate image id"));
        }
        let img_path = dir.join(&rec.file_name);
        let img = image::open(&img_path).map_err(|e| DatasetError::Image {
            path: img_path.clone(),
            message: e.to_string(),
        })?;
        let gray = img.to_luma8();
        if gray.width() as usize != size || gray.height() as usize != size {
            return Err(schema(record, "PNG dimensions differ from record"));
        }
        scenes.push(Scene {
            id: rec.id,
            canvas_size: size,
            image: gray.into_raw(),
            instances: Vec::new(),
        });
    }

    let mut points: Vec<Vec<PointAnnotation>> = vec![Vec::new(); scenes.len()];
    for ann in &file.annotations {
        let record = format!("annotation {}", ann.id);
        let Some(&si) = by_id.get(&ann.image_id) else {
            return Err(schema(record, format!("unknown image_id {}", ann.image_id)));
        };
        if ann.category_id >= num_categories {
            return Err(schema(record, format!("category_id {} out of range", ann.category_id)));
        }
        let xywh: [f64; 4] = ann
            .bbox
            .as_slice()
            .try_into()
            .map_err(|_| schema(record.clone(), "bbox must have 4 entries"))?;
        let bbox = BBox::from_xywh_pixels(xywh, size)
            .map_err(|e| schema(record.clone(), e.to_string()))?;
        if bbox.x1 < 0.0 || bbox.y1 < 0.0 || bbox.x2 > 1.0 || bbox.y2 > 1.0 {
            return Err(schema(record, "bbox leaves the canvas"));
        }
        if ann.segmentation.size != [size, size] {
            return Err(schema(record, "segmentation size differs from canvas"));
        }
        let mask = Mask::from_rle(size, size, &ann.segmentation.counts)
            .ok_or_else(|| schema(record.clone(), "segmentation counts do not cover the canvas"))?;
        if mask.count() == 0 {
            return Err(schema(record, "empty segmentation"));
        }
        let point = match ann.point {
            Some([x, y]) => {
                let p = PointAnnotation::new(x / size as f64, y / size as f64, ann.category_id);
                if !(0.0..=1.0).contains(&p.x) || !(0.0..=1.0).contains(&p.y) {
                    return Err(schema(record, "point leaves the canvas"));
                }
                p
            }
            None => {
                let (x, y) = bbox.center();
                PointAnnotation::new(x, y, ann.category_id)
            }
        };
        let scene = &mut scenes[si];
        scene.instances.push(Instance {
            id: ann.id,
            category: ann.category_id,
            bbox,
            mask,
            shape: ann.shape.unwrap_or(ShapeParams {
                cx: 0.0,
                cy: 0.0,
                w: 0.0,
                h: 0.0,
                intensity: 0.0,
            }),
        });
        points[si].push(point);
    }

    if let Some(split) = &file.split {
        let mut ids: Vec<u64> = split.full.iter().chain(&split.weak).copied().collect();
        ids.sort_unstable();
        let mut expect: Vec<u64> = scenes.iter().map(|s| s.id).collect();
        expect.sort_unstable();
        if ids != expect {
            return Err(schema("split", "full and weak sets must partition the images"));
        }
    }

    Ok(Dataset {
        scene_config: info.scene_config.clone(),
        seed: info.seed,
        point_mode: info.point_mode,
        scenes,
        points,
        split: file.split,
    })
}
