use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("validation failed for image {image_id}: {message}")]
    Validation { image_id: String, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("class {class} has {available} < {k}")]
    InsufficientInstances {
        class: usize,
        available: usize,
        k: usize,
    },

    #[error("not enough in-range instances (range [{lo}, {hi})): {counts}")]
    InsufficientInRange { lo: f64, hi: f64, counts: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate box: {0}")]
    DegenerateBox(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image codec error for {path}: {message}")]
    Image { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
