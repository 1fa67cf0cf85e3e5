use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: u64, loss: f64 },
    #[error("sequence too short: need {needed} frames, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("stage {0} needs a dataset that was not provided")]
    MissingDataset(&'static str),
    #[error(transparent)]
    Core(#[from] maskmotion_core::error::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
