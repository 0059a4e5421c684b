use std::path::PathBuf;

use thiserror::Error;

use crate::numerics::NumericsError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed document {path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("checksum mismatch for {path}")]
    Checksum { path: PathBuf },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("unknown subject `{0}`")]
    UnknownSubject(String),
    #[error("stimulus id {id} outside bank of {bank}")]
    UnknownStimulus { id: usize, bank: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("rank-deficient mixing map for subject `{subject}` after {attempts} attempts")]
    RankDeficient { subject: String, attempts: usize },
    #[error("training diverged at epoch {epoch}, step {step}")]
    Divergence {
        epoch: usize,
        step: usize,
        last_finite: Box<crate::train::Checkpoint>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn malformed(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            message: message.into(),
        }
    }
}
