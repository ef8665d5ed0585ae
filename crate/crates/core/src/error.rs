use thiserror::Error;

/// Error type shared across the pipeline.
///
/// The variants map onto the CLI exit codes: configuration errors exit
/// with 2, data errors with 3 and numeric errors with 4.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid parameters, schemes or mismatched component dimensions.
    #[error("configuration error: {0}")]
    Config(String),
    /// Malformed or inconsistent input data and artifacts.
    #[error("data error: {0}")]
    Data(String),
    /// Numerical failure (singular systems, non-convergence).
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::Json(_) | Error::Csv(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}
