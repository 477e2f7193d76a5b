// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid alphabet: {0}")]
    InvalidAlphabet(String),
    #[error("invalid corpus: {0}")]
    InvalidCorpus(String),
    #[error("token id {id} is out of range for a vocabulary of {vocab_size}")]
    InvalidTokenId { id: u32, vocab_size: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid augmentation: {0}")]
    InvalidAugment(String),
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("context of {len} tokens exceeds the window of {window}")]
    ContextOverflow { len: usize, window: usize },
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    TrainingDiverged { epoch: usize, loss: f64 },
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("fusion received no usable candidate")]
    EmptyFusion,
    #[error("invalid number of augmented views: {0}")]
    InvalidK(String),
    #[error("invalid reward: {0}")]
    InvalidReward(String),
    #[error("invalid reward table: {0}")]
    InvalidTable(String),
    #[error("vocabulary mismatch: {left} vs {right}")]
    VocabMismatch { left: usize, right: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("unsupported format version {found} (this build reads up to {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("stale artifact {}: manifest records {expected}, found {actual}", path.display())]
    StaleArtifact {
        path: PathBuf,
        expected: String,
        actual: String,
    },
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
