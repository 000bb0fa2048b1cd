use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("dataset structure error: {0}")]
    Structure(String),

    #[error("dataset at {0} contains no matched blur/sharp pairs")]
    EmptyDataset(PathBuf),

    #[error("probability outside [0, 1] or not finite in {0}")]
    Domain(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite {term} at epoch {epoch}, step {step}")]
    NonFinite { term: String, epoch: usize, step: u64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("pretrained feature-extractor weights unavailable: {0}; pass the seeded-random extractor source to run without them")]
    PretrainedUnavailable(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
