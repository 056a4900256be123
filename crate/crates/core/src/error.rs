use std::path::PathBuf;

use ndgrad::NdError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, SsptError>;

#[derive(Debug, Error)]
pub enum SsptError {
    #[error(transparent)]
    Tensor(#[from] NdError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: u64,
        message: String,
    },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown head `{0}`")]
    UnknownHead(String),

    #[error("unknown parameter group `{0}`")]
    UnknownGroup(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("degenerate return series (zero standard deviation)")]
    DegenerateReturns,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing artifact: expected {0}")]
    MissingArtifact(PathBuf),
}

impl SsptError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SsptError::Io {
            path: path.into(),
            source,
        }
    }

    /// Data and validation failures map to exit code 2, everything else the
    /// CLI treats as a usage problem.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, SsptError::Config(_))
    }
}
