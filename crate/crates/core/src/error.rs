use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("{0}: non-finite value encountered")]
    NonFinite(&'static str),

    #[error("diffusion step {tau} outside 1..={steps}")]
    StepOutOfRange { tau: usize, steps: usize },

    #[error("{stage}: loss became NaN ({detail})")]
    NanLoss { stage: &'static str, detail: String },

    #[error("sampling chain produced a non-finite latent at step {0}")]
    NonFiniteLatent(usize),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid image file {path}: {msg}")]
    ImageFormat { path: PathBuf, msg: String },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
