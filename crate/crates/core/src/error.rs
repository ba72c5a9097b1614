use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("adapter mismatch at layer {layer}, {projection}: {detail}")]
    AdapterMismatch {
        layer: usize,
        projection: String,
        detail: String,
    },

    #[error("no adapter factors for layer {layer}, {projection}")]
    Lookup { layer: usize, projection: String },

    #[error("incompatible adapters: {0}")]
    Compatibility(String),

    #[error("target error: {0}")]
    Target(String),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("degenerate samples (coincident eye landmarks) at indices {0:?}")]
    DegenerateSample(Vec<usize>),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image decode failed: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn at_path(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Path {
            path: path.into(),
            source,
        }
    }
}
