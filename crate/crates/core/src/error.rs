use std::io;

use thiserror::Error;

/// Errors raised by the model, its kernels and its file formats.
#[derive(Debug, Error)]
pub enum DvpError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("training fault: {0}")]
    TrainingFault(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = DvpError> = std::result::Result<T, E>;

impl DvpError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        DvpError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn usage(detail: impl Into<String>) -> Self {
        DvpError::Usage(detail.into())
    }
}
