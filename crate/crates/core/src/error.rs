use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header {path}: {msg}")]
    Header { path: PathBuf, msg: String },

    #[error("length mismatch: expected {expected} values, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("unknown dtype {0:?}")]
    UnknownDtype(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("unsanitized data: non-finite value at voxel {0}")]
    Unsanitized(usize),

    #[error("empty selection: {0}")]
    EmptySelection(String),

    #[error("degenerate channel {0:?}: {1}")]
    DegenerateChannel(String, String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown channel {0:?}")]
    UnknownChannel(String),

    #[error("index {index} out of range for grid of {len} voxels")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("no orthogonal content: input lies in the feature column space")]
    NoOrthogonalContent,

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
