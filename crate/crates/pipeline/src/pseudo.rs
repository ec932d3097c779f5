//! Pseudo-labels for weak scenes, from a point teacher or from thresholded
//! set predictions, and their COCO-like file format.

use std::path::Path;

use pointq_core::geometry::{BBox, PointAnnotation};
use pointq_core::metrics::Detection;
use pointq_model::{Detector, ModelError};
use serde::{Deserialize, Serialize};

use crate::error::PipelineError;
use crate::views::WeakImage;

/// Score given to every point-teacher pseudo-box.
pub const POINT_PSEUDO_SCORE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub scene_id: u64,
    /// Instance the source point annotates; absent for baseline labels.
    pub annotation_id: Option<u64>,
    /// The source point; absent for baseline labels.
    pub point: Option<PointAnnotation>,
    pub bbox: BBox,
    pub category: usize,
    pub score: f64,
}

impl PseudoLabel {
    pub fn as_detection(&self) -> Detection {
        Detection {
            image_id: self.scene_id,
            bbox: self.bbox,
            category: self.category,
            score: self.score,
        }
    }
}

/// Score attached to baseline pseudo-labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BaselineScore {
    /// The winning class probability.
    #[default]
    Probability,
    /// The fixed point-teacher score.
    Constant,
}

/// Exactly one pseudo-box per point, in input order, scored
/// [`POINT_PSEUDO_SCORE`].
pub fn generate_pseudo_labels(
    teacher: &Detector,
    weak: &[WeakImage<'_>],
    batch_size: usize,
) -> Result<Vec<PseudoLabel>, PipelineError> {
    let mut out = Vec::new();
    for chunk in weak.chunks(batch_size.max(1)) {
        let images: Vec<&[u8]> = chunk.iter().map(|w| w.image).collect();
        let points: Vec<Vec<PointAnnotation>> = chunk.iter().map(|w| w.points.to_vec()).collect();
        let preds = teacher.predict_points(&images, &points)?;
        for (w, ps) in chunk.iter().zip(preds) {
            for (i, (p, pred)) in w.points.iter().zip(ps).enumerate() {
                out.push(PseudoLabel {
                    scene_id: w.scene_id,
                    annotation_id: Some(w.annotation_id(i)),
                    point: Some(*p),
                    bbox: pred.bbox,
                    category: p.category,
                    score: POINT_PSEUDO_SCORE,
                });
            }
        }
    }
    Ok(out)
}

/// Keeps the queries whose arg-max class is a foreground class with
/// probability above `tau`.
pub fn generate_pseudo_labels_baseline(
    teacher: &Detector,
    weak: &[WeakImage<'_>],
    tau: f64,
    score: BaselineScore,
    batch_size: usize,
) -> Result<Vec<PseudoLabel>, PipelineError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(PipelineError::Config(format!("tau {tau} outside [0, 1]")));
    }
    let mut out = Vec::new();
    for chunk in weak.chunks(batch_size.max(1)) {
        let images: Vec<&[u8]> = chunk.iter().map(|w| w.image).collect();
        for (w, queries) in chunk.iter().zip(teacher.predict_set(&images)?) {
            for q in queries {
                if let Some((category, p)) = q.foreground() {
                    if p > tau {
                        out.push(PseudoLabel {
                            scene_id: w.scene_id,
                            annotation_id: None,
                            point: None,
                            bbox: q.bbox,
                            category,
                            score: match score {
                                BaselineScore::Probability => p,
                                BaselineScore::Constant => POINT_PSEUDO_SCORE,
                            },
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Set-mode detections for evaluation: every query, labeled with its best
/// foreground class and scored by that class's probability.
pub fn detect(model: &Detector, images: &[(u64, &[u8])], batch_size: usize) -> Result<Vec<Detection>, ModelError> {
    let mut out = Vec::new();
    for chunk in images.chunks(batch_size.max(1)) {
        let imgs: Vec<&[u8]> = chunk.iter().map(|(_, i)| *i).collect();
        for ((id, _), queries) in chunk.iter().zip(model.predict_set(&imgs)?) {
            for q in queries {
                let fg = &q.probs[..q.probs.len() - 1];
                let (category, score) = fg
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |a, (i, &p)| if p > a.1 { (i, p) } else { a });
                out.push(Detection {
                    image_id: *id,
                    bbox: q.bbox,
                    category,
                    score,
                });
            }
        }
    }
    Ok(out)
}

pub const PSEUDO_FORMAT: &str = "pointq-pseudo";

#[derive(Serialize, Deserialize)]
struct PseudoRecord {
    id: usize,
    image_id: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    annotation_id: Option<u64>,
    category_id: usize,
    /// `[x, y, w, h]` in pixels.
    bbox: [f64; 4],
    #[serde(skip_serializing_if = "Option::is_none", default)]
    point: Option<[f64; 2]>,
    score: f64,
}

#[derive(Serialize, Deserialize)]
struct PseudoFile {
    format: String,
    version: u32,
    canvas_size: usize,
    annotations: Vec<PseudoRecord>,
}

/// Writes labels in the dataset's annotation schema plus a `score` field.
pub fn save_pseudo_labels(labels: &[PseudoLabel], canvas_size: usize, path: &Path) -> Result<(), PipelineError> {
    let s = canvas_size as f64;
    let file = PseudoFile {
        format: PSEUDO_FORMAT.into(),
        version: 1,
        canvas_size,
        annotations: labels
            .iter()
            .enumerate()
            .map(|(id, l)| PseudoRecord {
                id,
                image_id: l.scene_id,
                annotation_id: l.annotation_id,
                category_id: l.category,
                bbox: l.bbox.to_xywh_pixels(canvas_size),
                point: l.point.map(|p| [p.x * s, p.y * s]),
                score: l.score,
            })
            .collect(),
    };
    let json = serde_json::to_vec_pretty(&file).expect("pseudo labels serialize");
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_pseudo_labels(path: &Path) -> Result<Vec<PseudoLabel>, PipelineError> {
    let fail = |message: String| PipelineError::Format {
        path: path.display().to_string(),
        message,
    };
    let bytes = std::fs::read(path)?;
    let file: PseudoFile = serde_json::from_slice(&bytes).map_err(|e| fail(e.to_string()))?;
    if file.format != PSEUDO_FORMAT {
        return Err(fail(format!("format is {:?}, expected {PSEUDO_FORMAT:?}", file.format)));
    }
    let s = file.canvas_size as f64;
    file.annotations
        .into_iter()
        .map(|r| {
            let bbox = BBox::from_xywh_pixels(r.bbox, file.canvas_size)
                .map_err(|e| fail(format!("annotation {}: {e}", r.id)))?;
            if !(0.0..=1.0).contains(&r.score) {
                return Err(fail(format!("annotation {}: score {} outside [0, 1]", r.id, r.score)));
            }
            Ok(PseudoLabel {
                scene_id: r.image_id,
                annotation_id: r.annotation_id,
                point: r.point.map(|p| PointAnnotation::new(p[0] / s, p[1] / s, r.category_id)),
                bbox,
                category: r.category_id,
                score: r.score,
            })
        })
        .collect()
}
