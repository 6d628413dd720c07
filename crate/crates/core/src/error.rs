use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("annotation out of bounds: {0}")]
    AnnotationOutOfBounds(String),
    #[error("degenerate RECIST: {0}")]
    DegenerateRecist(String),
    #[error("invalid trimap: {0}")]
    InvalidTrimap(String),
    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("AVD undefined for empty set")]
    EmptyMask,
    #[error("backward called before a forward pass was recorded")]
    NoForwardPass,
    #[error("input too large for exact dense CRF ({pixels} pixels > {limit}); use the downsampled mode")]
    CrfTooLarge { pixels: usize, limit: usize },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("missing upstream artifact {path}: {hint}")]
    MissingArtifact { path: PathBuf, hint: String },
    #[error("stale upstream: {0}")]
    Stale(String),
    #[error("id mismatch: {0}")]
    IdMismatch(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable machine-readable identifier of the error kind.
    pub fn code(&self) -> &'static str {
        match self {
            Error::AnnotationOutOfBounds(_) => "annotation-out-of-bounds",
            Error::DegenerateRecist(_) => "degenerate-recist",
            Error::InvalidTrimap(_) => "invalid-trimap",
            Error::InsufficientSamples { .. } => "insufficient-samples",
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::DimensionMismatch(_) => "dimension-mismatch",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::EmptyMask => "empty-mask",
            Error::NoForwardPass => "no-forward-pass",
            Error::CrfTooLarge { .. } => "crf-too-large",
            Error::Empty(_) => "empty",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::MissingArtifact { .. } => "missing-artifact",
            Error::Stale(_) => "stale-upstream",
            Error::IdMismatch(_) => "id-mismatch",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }
}
