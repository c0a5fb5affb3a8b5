use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("stroke {index}: {reason}")]
    MalformedStroke { index: usize, reason: String },

    #[error("invalid sketch: {0}")]
    InvalidSketch(String),

    #[error("sequence needs {required} slots but max_len is {max_len}")]
    Truncation { required: usize, max_len: usize },

    #[error("decode error: {0}")]
    Decode(String),

    #[error("codebook needs {k} distinct points but the sample has only {distinct}; try a smaller K")]
    TooFewDistinctPoints { k: usize, distinct: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite loss at step {step} (batch items {batch_ids:?})")]
    NonFiniteLoss { step: u64, batch_ids: Vec<usize> },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid label {label} for {n_classes} classes")]
    InvalidLabel { label: usize, n_classes: usize },

    #[error("bad container format: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
