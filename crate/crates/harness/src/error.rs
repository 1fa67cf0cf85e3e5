use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error("skeleton hash {found:016x} does not match {expected:016x}")]
    SkeletonMismatch { found: u64, expected: u64 },
    #[error("subject behind camera at frame {frame}")]
    SubjectBehindCamera { frame: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] maskmotion_model::ModelError),
    #[error(transparent)]
    Core(#[from] maskmotion_core::Error),
}

impl HarnessError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.as_ref().display().to_string(), source }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
