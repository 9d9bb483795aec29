use thiserror::Error;

/// Errors produced anywhere in the simulator.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid mask: {0}")]
    Mask(String),
    #[error("invalid dropout rate: {0}")]
    Rate(String),
    #[error("aggregation error: {0}")]
    Aggregation(String),
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("analysis error in {equation}: {message}")]
    Analysis { equation: String, message: String },
    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn analysis(equation: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Analysis {
            equation: equation.into(),
            message: message.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
