use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{section}: {detail}")]
    Format { section: String, detail: String },
    #[error("verification failed: {0}")]
    Validation(String),
    #[error(transparent)]
    Core(#[from] dlf_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit status: 2 for usage errors, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(section: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            section: section.into(),
            detail: detail.into(),
        }
    }
}
