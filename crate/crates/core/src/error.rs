use std::path::PathBuf;

/// Errors produced by the detection pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid stain basis: {0}")]
    InvalidStainBasis(String),
    #[error("insufficient tissue: {found} stained pixels, need at least {needed}")]
    InsufficientTissue { found: usize, needed: usize },
    #[error("single stain: optical density cloud is rank deficient")]
    SingleStain,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },
    #[error("too few samples: {0}")]
    TooFewSamples(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("dataset must contain both classes: {0}")]
    SingleClass(String),
    #[error("infeasible packing: could not place {wanted} shapes after {attempts} attempts")]
    InfeasiblePacking { wanted: usize, attempts: usize },
    #[error("embedder failed: {0}")]
    Embedder(String),
    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("malformed annotation file {}: {reason}", path.display())]
    MalformedAnnotations { path: PathBuf, reason: String },
    #[error("point ({x}, {y}) lies outside image `{image_id}` ({width}x{height})")]
    OutOfBounds {
        image_id: String,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("config error at line {line}: {reason}")]
    Config { line: usize, reason: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
