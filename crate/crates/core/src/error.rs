use thiserror::Error;

/// Errors produced by the inference library.
#[derive(Debug, Error)]
pub enum NetinfError {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("insufficient data: experiment has {points} points but truncation length is {trunc}")]
    InsufficientData { points: usize, trunc: usize },

    #[error("network generation failed after {attempts} attempts: {constraint}")]
    Generation { attempts: usize, constraint: String },

    #[error("numerical failure in {context}: {detail}")]
    Numerical { context: &'static str, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl NetinfError {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        NetinfError::InvalidParameter { name, reason: reason.into() }
    }

    pub(crate) fn numerical(context: &'static str, detail: impl Into<String>) -> Self {
        NetinfError::Numerical { context, detail: detail.into() }
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        NetinfError::Usage(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, NetinfError>;
