use thiserror::Error;

/// Errors raised by design construction, estimation and the simulation harness.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid design: {0}")]
    InvalidDesign(String),
    #[error("design is not a BIBD: {0}")]
    NotBibd(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("enumeration would visit {count} assignments, above the cap of {cap}")]
    EnumerationCap { count: String, cap: u64 },
    #[error("estimator undefined: {0}")]
    Undefined(String),
    #[error("variance estimator unavailable: {0}")]
    Unavailable(String),
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::InvalidData(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::InvalidData(e.to_string())
    }
}
