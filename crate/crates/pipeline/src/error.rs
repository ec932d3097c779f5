use pointq_core::dataset::DatasetError;
use pointq_core::metrics::MetricsError;
use pointq_model::ModelError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid train plan: {0}")]
    Plan(String),
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("{stage} diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence {
        stage: &'static str,
        epoch: usize,
        step: usize,
        loss: f64,
    },
    #[error("{0} training set is empty")]
    EmptyTrainingSet(&'static str),
    #[error("dataset has no full/weak split")]
    MissingSplit,
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<candle_core::Error> for PipelineError {
    fn from(e: candle_core::Error) -> Self {
        PipelineError::Model(ModelError::Tensor(e))
    }
}
