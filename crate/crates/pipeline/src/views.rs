//! Training-side views of a split dataset.
//!
//! Weak scenes are exposed only through [`WeakImage`], which carries the image
//! and its point annotations. Ground-truth boxes of weak scenes are reachable
//! only through [`weak_ground_truth`], which exists for evaluation.

use pointq_core::dataset::Dataset;
use pointq_core::geometry::PointAnnotation;
use pointq_core::metrics::GroundTruth;
use pointq_core::synth::{instance_id, Scene};

use crate::error::PipelineError;

/// A fully labeled scene.
#[derive(Debug, Clone, Copy)]
pub struct FullImage<'a> {
    pub scene: &'a Scene,
}

/// A weakly labeled scene: pixels and points, nothing else.
#[derive(Debug, Clone, Copy)]
pub struct WeakImage<'a> {
    pub scene_id: u64,
    pub image: &'a [u8],
    /// `points[i]` annotates instance `annotation_id(i)`.
    pub points: &'a [PointAnnotation],
}

impl WeakImage<'_> {
    pub fn annotation_id(&self, i: usize) -> u64 {
        instance_id(self.scene_id, i)
    }
}

pub struct SplitView<'a> {
    pub full: Vec<FullImage<'a>>,
    pub weak: Vec<WeakImage<'a>>,
}

pub fn split_view(ds: &Dataset) -> Result<SplitView<'_>, PipelineError> {
    let split = ds.split.as_ref().ok_or(PipelineError::MissingSplit)?;
    let mut full = Vec::new();
    let mut weak = Vec::new();
    let is_full: std::collections::HashSet<u64> = split.full.iter().copied().collect();
    for (scene, points) in ds.scenes.iter().zip(&ds.points) {
        if is_full.contains(&scene.id) {
            full.push(FullImage { scene });
        } else {
            weak.push(WeakImage {
                scene_id: scene.id,
                image: &scene.image,
                points,
            });
        }
    }
    Ok(SplitView { full, weak })
}

pub fn scene_ground_truth(scene: &Scene) -> impl Iterator<Item = GroundTruth> + '_ {
    scene.instances.iter().map(move |i| GroundTruth {
        image_id: scene.id,
        id: i.id,
        bbox: i.bbox,
        category: i.category,
    })
}

/// Ground truth of every scene, for held-out evaluation.
pub fn ground_truth(ds: &Dataset) -> Vec<GroundTruth> {
    ds.scenes.iter().flat_map(scene_ground_truth).collect()
}

/// Ground truth of the weak scenes. Evaluation only.
pub fn weak_ground_truth(ds: &Dataset) -> Result<Vec<GroundTruth>, PipelineError> {
    let split = ds.split.as_ref().ok_or(PipelineError::MissingSplit)?;
    Ok(ds
        .scenes
        .iter()
        .filter(|s| !split.is_full(s.id))
        .flat_map(scene_ground_truth)
        .collect())
}
