//! Core building blocks for point-annotated detection experiments: box
//! geometry, synthetic shape scenes, optimal assignment and detection metrics.

pub mod dataset;
pub mod geometry;
pub mod matcher;
pub mod metrics;
pub mod seeding;
pub mod synth;

pub use dataset::{load_dataset, save_dataset, Dataset, DatasetConfig, DatasetError};
pub use geometry::{decode_offsets, encode_offsets, giou, iou, BBox, GeometryError, OffsetQuad, PointAnnotation};
pub use matcher::{hungarian, match_cost, Assignment, CostMatrix, MatchError, MatchWeights};
pub use metrics::{
    coco_eval, instance_recall, pseudo_miou, tide_diagnose, Detection, ErrorProfile, EvalParams,
    EvalResult, GroundTruth, TideParams,
};
pub use synth::{
    generate_scene, sample_point, split_dataset, DatasetSplit, Instance, Mask, PointMode, Scene,
    SceneConfig, SynthError,
};
