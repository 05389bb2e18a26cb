use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in `{op}`: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("unsupported moment order ({p},{q}): orders are limited to p,q in {{0,1,2}} with p+q <= 2")]
    UnsupportedOrder { p: usize, q: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("backward was already run on this tape; record a fresh tape before differentiating again")]
    TapeConsumed,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("descriptor prior covers {prior_classes} classes but the prediction has {num_classes}")]
    PriorClassMismatch {
        prior_classes: usize,
        num_classes: usize,
    },

    #[error("volume format error: {0}")]
    VolumeFormat(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("phantom geometry error: {0}")]
    Geometry(String),

    #[error("dataset is empty: {0}")]
    EmptyDataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
