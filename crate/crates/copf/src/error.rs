//! Error type shared across the engine.
//!
//! Variants map onto the process exit codes used by the `copf` binary:
//! usage/config problems exit 1, data problems exit 2, numeric failures
//! exit 3.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum CopfError {
    /// Bad configuration: invalid key, invalid value, shape mismatch.
    #[error("configuration error: {0}")]
    Config(String),

    /// Misuse of an engine API (e.g. backward on a non-scalar node).
    #[error("usage error: {0}")]
    Usage(String),

    /// Ingestion or dataset problems.
    #[error("data error: {0}")]
    Data(String),

    /// Numeric failure: non-finite values, failed verification.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A verification routine could not run to completion.
    #[error("verification error: {0}")]
    Verification(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CopfError {
    /// Process exit code for the CLI: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            CopfError::Config(_) | CopfError::Usage(_) => 1,
            CopfError::Data(_) | CopfError::Io(_) | CopfError::Json(_) => 2,
            CopfError::Numeric(_) | CopfError::Verification(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, CopfError>;
