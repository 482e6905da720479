//! Crate-wide error type and result alias.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration: rejected before any work starts.
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    /// Bad caller input (empty prompt, malformed flag value, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// A model service call failed after retries.
    #[error("backend error: {message}")]
    Backend {
        status: Option<u16>,
        message: String,
    },
    /// Stored run data is inconsistent (digest mismatch, corrupt file, ...).
    #[error("data error: {0}")]
    Data(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn backend(message: impl Into<String>) -> Self {
        Error::Backend {
            status: None,
            message: message.into(),
        }
    }

    pub fn backend_status(status: u16, message: impl Into<String>) -> Self {
        Error::Backend {
            status: Some(status),
            message: message.into(),
        }
    }

    /// Process exit code for CLI surfaces: 1 usage, 2 backend, 3 data.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::InvalidInput(_) => 1,
            Error::Backend { .. } => 2,
            Error::Data(_) | Error::Io(_) | Error::Json(_) => 3,
        }
    }
}
