//! Point-conditioned and set-prediction detectors on a small convolutional
//! backbone with a DETR-style transformer.

pub mod checkpoint;
pub mod detector;
pub mod error;
pub mod loss;
pub mod nn;
pub mod point_encoder;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, save_checkpoint, CheckpointMeta};
pub use detector::{
    decode_head_output, Detector, DetectorMode, ModelConfig, PointPrediction, QueryPrediction, Regression,
};
pub use error::ModelError;
pub use loss::{batch_set_loss, box_loss, box_loss_tensor, giou_tensor, match_targets, set_loss, LossWeights};
pub use point_encoder::{grid_positional_map, positional_encoding, PointEncoder, PointEncoderConfig};
