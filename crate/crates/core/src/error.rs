use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit codes documented
/// in `main.rs` (argument, data, numeric, io, config).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("corrupt product: {0}")]
    CorruptProduct(String),

    #[error("geo-reference missing: {0}")]
    GeoReferenceMissing(String),

    #[error("insufficient coverage: {0}")]
    InsufficientCoverage(String),

    #[error("data gap: {0}")]
    DataGap(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("stats error: {0}")]
    Stats(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("provenance error: {0}")]
    Provenance(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
