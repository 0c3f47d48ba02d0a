use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid partition for video {video_id}: {reason}")]
    InvalidPartition { video_id: String, reason: String },

    #[error("ungrammatical tag sequence at position {position}: {reason}")]
    Ungrammatical { position: usize, reason: String },

    #[error("scene {scene} mixes categories {first} and {second}")]
    MixedCategories {
        scene: usize,
        first: String,
        second: String,
    },

    #[error("unknown category {0:?}")]
    UnknownCategory(String),

    #[error("category required: {0}")]
    MissingCategory(String),

    #[error("unknown video {0:?}")]
    UnknownVideo(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("duplicate shot {shot_index} in video {video_id}")]
    DuplicateShot { video_id: String, shot_index: usize },

    #[error("video {video_id} is missing shot index {missing}")]
    ShotGap { video_id: String, missing: usize },

    #[error("invalid shot record: {0}")]
    InvalidShot(String),

    #[error("batch normalization in train mode needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),

    #[error("sequence length {len} exceeds the encoder limit {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("scheme mismatch: checkpoint was trained for {expected}, got {found}")]
    SchemeMismatch { expected: String, found: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint version mismatch: found {found:?}")]
    CheckpointVersion { found: String },

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: usize, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
