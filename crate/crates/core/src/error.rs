use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid twist: {0}")]
    InvalidTwist(String),

    #[error("invalid cylinder: {0}")]
    InvalidCylinder(String),

    #[error("invalid depth: Z = {0}")]
    InvalidDepth(f64),

    #[error("insufficient features: {visible} visible, need at least {required}")]
    InsufficientFeatures { visible: usize, required: usize },

    #[error("degenerate desired pose: scene center at {0:.3e} m from camera")]
    DegenerateDesiredPose(f64),

    #[error("invalid distance prior: {0}")]
    InvalidDistancePrior(f64),

    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
