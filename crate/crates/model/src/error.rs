use thiserror::Error;

use crate::detector::DetectorMode;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("category {category} out of range for {num_categories} categories")]
    CategoryOutOfRange { category: usize, num_categories: usize },
    #[error("operation needs a {expected} model but this one is {actual}")]
    ModeMismatch {
        expected: DetectorMode,
        actual: DetectorMode,
    },
    #[error("image {index} has {got} pixels, expected {expected}")]
    ImageSize {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("{targets} targets but only {queries} queries")]
    TooManyTargets { targets: usize, queries: usize },
    #[error("invalid assignment: {0}")]
    InvalidAssignment(String),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
