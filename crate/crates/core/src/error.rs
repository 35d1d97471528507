use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("no segmentation token in generated sequence")]
    NoSegToken,

    #[error("grid {g}x{g} is finer than the {min_side}-cell short side of the similarity map")]
    GridTooFine { g: usize, min_side: usize },

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("critic output has no final-decision marker")]
    UnparseableVerdict,

    #[error("assistant transport failed for sample {sample_id}: {message}")]
    PipelineIo { sample_id: String, message: String },

    #[error("no approved records to package")]
    EmptyDataset,

    #[error("config: {0}")]
    Config(String),

    #[error("sample {sample_id}: {source}")]
    Sample {
        sample_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable tag used in CLI error documents.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid-input",
            Error::NoSegToken => "no-seg-token",
            Error::GridTooFine { .. } => "grid-too-fine",
            Error::ContractViolation(_) => "contract-violation",
            Error::UnparseableVerdict => "unparseable-verdict",
            Error::PipelineIo { .. } => "pipeline-io",
            Error::EmptyDataset => "empty-dataset",
            Error::Config(_) => "config",
            Error::Sample { source, .. } => source.kind(),
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn in_sample(self, sample_id: impl Into<String>) -> Self {
        Error::Sample {
            sample_id: sample_id.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
