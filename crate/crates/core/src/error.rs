use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("mesh at level {fine} is not a refinement descendant of the coarse mesh at level {coarse}")]
    NotDescendant { coarse: usize, fine: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing checkpoints: {0}")]
    MissingCheckpoints(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("checksum mismatch for {0}")]
    Checksum(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
