use thiserror::Error;

#[derive(Debug, Error)]
pub enum SketchError {
    #[error("invalid sketch: {0}")]
    InvalidSketch(String),
    #[error("empty sketch")]
    EmptySketch,
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch { expected: [usize; 2], got: [usize; 2] },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("instance {0} not in gallery")]
    MissingInstance(u64),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Autodiff(#[from] autodiff::AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = SketchError> = std::result::Result<T, E>;
