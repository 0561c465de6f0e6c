use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("tape already consumed; enable accumulation or build a new graph")]
    TapeConsumed,

    #[error("unknown node id {0}")]
    UnknownNode(usize),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("style dimension {requested} exceeds available null-space dimension {available}")]
    StyleDim { requested: usize, available: usize },

    #[error("wrong magic: expected {expected}, found {found}")]
    WrongMagic { expected: u32, found: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("image/label count mismatch: {images} images, {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("dataset has no style labels")]
    MissingStyles,

    #[error("objective variant {variant} expects inner loss {expected}, adversarial batch used {found}")]
    VariantMismatch {
        variant: &'static str,
        expected: &'static str,
        found: &'static str,
    },

    #[error("training diverged at epoch {epoch}, step {step}: non-finite loss")]
    Diverged { epoch: usize, step: usize },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
