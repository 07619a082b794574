//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {context} (expected {expected}, got {got})")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    SampleRateMismatch(u32, u32),

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("waveform too short: {got} samples, need at least {min}")]
    TooShort { got: usize, min: usize },

    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("reference signal is identically zero")]
    ZeroReference,

    #[error("invalid caption: {0}")]
    InvalidCaption(String),

    #[error("invalid query: {0}")]
    InvalidQuery(String),

    #[error("corrupt cache file at byte offset {offset}: {reason}")]
    CorruptCache { offset: u64, reason: String },

    #[error("corrupt embedding file at byte offset {offset}: {reason}")]
    CorruptEmbeddingFile { offset: u64, reason: String },

    #[error("corrupt checkpoint at byte offset {offset}: {reason}")]
    CorruptCheckpoint { offset: u64, reason: String },

    #[error("encoder failed on caption {index}: {source}")]
    EncoderFailure {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite gradient at step {step}: {context}")]
    NanGradient { step: u64, context: String },

    #[error("non-finite loss at step {step} (loss = {loss})")]
    NanLoss { step: u64, loss: f64 },

    #[error("missing caption for test example {0}")]
    MissingCaption(usize),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error on {path}: {reason}")]
    Wav { path: PathBuf, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input or configuration, as opposed
    /// to runtime failures. The CLI maps these to exit code 2.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::InvalidCaption(_)
                | Error::InvalidBatch(_)
                | Error::DimensionMismatch { .. }
                | Error::SampleRateMismatch(..)
        )
    }
}
