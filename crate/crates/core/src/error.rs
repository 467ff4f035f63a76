use thiserror::Error;

/// Errors raised by the unmixing library.
#[derive(Debug, Error)]
pub enum HelenError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error: {name}({value}) is undefined")]
    Domain { name: &'static str, value: f64 },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {message}")]
    Numerical { message: String, iterate: Vec<f64> },

    #[error("non-finite ELBO at sweep {sweep}")]
    NonFiniteElbo { sweep: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HelenError>;

impl HelenError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        HelenError::InvalidArgument(msg.into())
    }
}
