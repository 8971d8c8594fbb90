use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Input outside the function's domain, e.g. a scale-invariant loss at the origin.
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// Caller broke a documented precondition.
    #[error("contract violated in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("non-finite value in {op}: {detail}")]
    NonFinite { op: &'static str, detail: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("config error at line {line}, field `{field}`: {detail}")]
    Config {
        line: usize,
        field: String,
        detail: String,
    },

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn non_finite(op: &'static str, detail: impl Into<String>) -> Self {
        Error::NonFinite {
            op,
            detail: detail.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
