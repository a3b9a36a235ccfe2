use std::path::PathBuf;

use thiserror::Error;

use crate::types::{ClassId, ImageId};

pub type Result<T, E = PalError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PalError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid config ({keys}): {msg}")]
    Config { keys: String, msg: String },

    #[error("{0}")]
    Validation(String),

    #[error("degenerate box: width and height must be positive, got w={w}, h={h}")]
    DegenerateBox { w: f64, h: f64 },

    #[error("unknown image {0}")]
    UnknownImage(ImageId),

    #[error("no embedding for image {0}")]
    MissingEmbedding(ImageId),

    #[error("classifier for class {0} is untrained and cannot be queried")]
    Untrained(ClassId),

    #[error("no detections in {0} pool")]
    EmptyPool(&'static str),

    #[error("negative value {0} cannot be min-max normalized")]
    NegativeScore(f64),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<PalError>,
    },
}

impl PalError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PalError::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps the error with a short description of the stage that failed.
    pub fn context(self, context: impl Into<String>) -> Self {
        PalError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// True for failures caused by the data the caller supplied rather than
    /// by a broken internal invariant.
    pub fn is_data_error(&self) -> bool {
        match self {
            PalError::Context { source, .. } => source.is_data_error(),
            PalError::Untrained(_) => false,
            _ => true,
        }
    }
}
