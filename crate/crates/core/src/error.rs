//! Error type shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An input violated a documented precondition (range, shape, label bound).
    #[error("validation: {0}")]
    Validation(String),

    /// A dataset cell was empty where stratified sampling needs at least one record.
    #[error("stratification: {0}")]
    Stratification(String),

    /// File or image I/O failed.
    #[error("storage: {path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Image encode/decode failed.
    #[error("image: {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    /// A numeric quantity that must stay finite did not.
    #[error("numeric: {0}")]
    Numeric(String),

    /// Training produced a non-finite objective; carries a diagnostic snapshot.
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    /// Checkpoint container is corrupt, has the wrong version, or does not
    /// match the expected architecture.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Config file or key-value override problem (including unknown keys).
    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub fn storage(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Storage {
            path: path.into(),
            source,
        }
    }

    pub fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }
}
