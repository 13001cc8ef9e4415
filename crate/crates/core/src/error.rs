use thiserror::Error;

pub type Result<T> = std::result::Result<T, CdmError>;

#[derive(Debug, Error)]
pub enum CdmError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("non-finite loss during {stage}: {detail}")]
    NonFiniteLoss { stage: &'static str, detail: String },

    #[error("stage `{required}` must be completed before `{requested}`")]
    MissingStage {
        required: &'static str,
        requested: &'static str,
    },

    #[error("corrupt file {path}: {detail}")]
    CorruptFile { path: String, detail: String },

    #[error("config error at line {line}: {detail}")]
    Config { line: usize, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CdmError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CdmError::InvalidArgument(msg.into())
    }

    pub fn shape(expected: impl Into<String>, actual: impl Into<String>) -> Self {
        CdmError::ShapeMismatch {
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}
