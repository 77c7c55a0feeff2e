use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate feature map: {0}")]
    DegenerateFeatureMap(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown config key `{0}`")]
    UnknownConfigKey(String),

    #[error("empty support mask")]
    EmptySupportMask,

    #[error("non-scalar loss of shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite loss at epoch {epoch}, step {step} (episode seed {episode_seed:#x})")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        episode_seed: u64,
    },

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("bad tensor file {path}: {reason}")]
    TensorFormat { path: PathBuf, reason: String },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

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
}
