use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),
    #[error("matrix is not a rotation (orthonormality error {0:.3e})")]
    NotARotation(f64),
    #[error("sequence too short: need at least {needed} frames, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("degenerate point configuration: {0}")]
    Degenerate(&'static str),
    #[error("point {index} is behind the camera (z = {z})")]
    BehindCamera { index: usize, z: f64 },
    #[error("degenerate weak-perspective scale: s·size = {0}")]
    DegenerateScale(f64),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(&'static str),
    #[error("bad skeleton: {0}")]
    BadSkeleton(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("ground-truth root path is stationary")]
    DegeneratePath,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
