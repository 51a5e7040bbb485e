use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad user input (CLI exit code 2).
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Usage(_) | Error::Config(_) | Error::Parse(_))
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
