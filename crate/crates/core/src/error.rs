use thiserror::Error;

/// Errors produced anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("layout mismatch: {0}")]
    Layout(String),

    #[error("malformed reasoning block: {0}")]
    Block(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value produced in {stage}")]
    NumericalOverflow { stage: String },

    #[error("training diverged: non-finite loss at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("unsupported format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn layout(msg: impl Into<String>) -> Self {
        Error::Layout(msg.into())
    }

    pub(crate) fn overflow(stage: impl Into<String>) -> Self {
        Error::NumericalOverflow {
            stage: stage.into(),
        }
    }
}
