use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty tensor")]
    EmptyTensor,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Structural problem with a model manifest or an in-memory graph.
    #[error("{0}")]
    Model(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: {msg}", path.display())]
    Manifest { path: PathBuf, line: usize, msg: String },

    #[error("image {}: {msg}", path.display())]
    Image { path: PathBuf, msg: String },

    #[error("non-finite value produced at layer {layer} ({kind})")]
    NonFinite { layer: usize, kind: &'static str },

    #[error("CAM requires GAP head: {0}")]
    CamRequiresGapHead(String),

    #[error("class index out of range: {index} (model has {classes} classes)")]
    ClassOutOfRange { index: usize, classes: usize },

    #[error("no evaluable samples")]
    NoEvaluableSamples,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
