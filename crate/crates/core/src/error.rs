use alloc::string::String;

/// Errors raised anywhere in the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A shape or calling-convention contract was violated.
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },
    /// An input lies outside the mathematical domain of an operation.
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    /// A configuration cannot be built.
    #[error("configuration error: {0}")]
    Config(String),
    /// A computation produced a non-finite value.
    #[error("numeric error in {layer}: {detail}")]
    Numeric { layer: String, detail: String },
    /// Input data is malformed or out of range.
    #[error("data error: {0}")]
    Data(String),
    /// A verification oracle could not be evaluated.
    #[error("oracle error: {0}")]
    Oracle(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
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

    pub(crate) fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }
}
