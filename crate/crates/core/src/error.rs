use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, EalmError>;

/// Every failure surfaced by the library. The CLI prints [`EalmError::class`]
/// as the first field of its one-line error message.
#[derive(Debug, Error)]
pub enum EalmError {
    #[error("config error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("numeric error in {tensor}: {detail}")]
    Numeric { tensor: String, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("empty batch: {0}")]
    EmptyBatch(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl EalmError {
    pub fn class(&self) -> &'static str {
        match self {
            EalmError::Config(_) => "ConfigError",
            EalmError::Usage(_) => "UsageError",
            EalmError::Numeric { .. } => "NumericError",
            EalmError::Contract(_) => "ContractError",
            EalmError::Format(_) => "FormatError",
            EalmError::EmptyBatch(_) => "EmptyBatchError",
            EalmError::Io { .. } => "IoError",
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        EalmError::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        EalmError::Usage(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        EalmError::Contract(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        EalmError::Format(msg.into())
    }

    pub fn numeric(tensor: impl Into<String>, detail: impl Into<String>) -> Self {
        EalmError::Numeric {
            tensor: tensor.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        EalmError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
