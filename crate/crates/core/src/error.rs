use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("cannot partition {extent} into windows of {window} ({context})")]
    Partition {
        extent: usize,
        window: usize,
        context: String,
    },

    #[error("degenerate batch: batch norm in train mode needs at least 2 values per channel, got {0}")]
    DegenerateBatch(usize),

    #[error("invalid call: {0}")]
    InvalidCall(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("degenerate weights: {0}")]
    DegenerateWeights(String),

    #[error("checkpoint error ({param}): {message}")]
    Checkpoint { param: String, message: String },

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn checkpoint(param: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Checkpoint {
            param: param.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
