use pointq_core::dataset::DatasetError;
use pointq_model::ModelError;
use pointq_pipeline::PipelineError;

/// Exit status 1 for [`CliError::User`], 2 for [`CliError::Internal`].
#[derive(Debug)]
pub enum CliError {
    User(String),
    Internal(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::User(m) => write!(f, "{m}"),
            CliError::Internal(e) => write!(f, "internal error: {e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Internal(e)
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_)
            | PipelineError::Plan(_)
            | PipelineError::MissingSplit
            | PipelineError::EmptyTrainingSet(_)
            | PipelineError::Format { .. } => CliError::User(e.to_string()),
            PipelineError::Model(m) => m.into(),
            PipelineError::Dataset(d) => d.into(),
            other => CliError::Internal(other.into()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) | ModelError::ModeMismatch { .. } | ModelError::Checkpoint { .. } => {
                CliError::User(e.to_string())
            }
            other => CliError::Internal(other.into()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } => CliError::Internal(e.into()),
            other => CliError::User(other.to_string()),
        }
    }
}
