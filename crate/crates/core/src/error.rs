use std::path::PathBuf;

/// Errors raised by the library. CLI maps every variant to exit status 1.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: PathBuf, column: String },

    #[error("{path}:{line}: {message}")]
    Row {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{path}:{line}: duplicate lot `{lot_id}` for product `{product_id}`")]
    DuplicateKey {
        path: PathBuf,
        line: u64,
        product_id: String,
        lot_id: String,
    },

    #[error("insufficient data: need at least {needed} values, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("degenerate control limits: {0}")]
    DegenerateLimits(String),

    #[error("{0}")]
    Domain(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
