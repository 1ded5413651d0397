use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter stores are not shape-compatible: group `{group}` differs ({detail})")]
    Incompatible { group: String, detail: String },

    #[error("sign bitmaps cover different scalar counts: {left} vs {right}")]
    CountMismatch { left: usize, right: usize },

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("not a checkpoint file: bad magic bytes {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("checkpoint file is truncated")]
    Truncated,

    #[error("malformed checkpoint: {0}")]
    Malformed(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("token id {token} out of range for vocabulary of {total}")]
    TokenOutOfRange { token: u32, total: u32 },

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty evaluation set")]
    EmptyEvalSet,

    #[error("non-finite loss at step {step}: {loss}")]
    NonFiniteLoss { step: u64, loss: f64 },

    #[error("pretraining reached capability accuracy {reached:.4}, below target {target:.4}")]
    TargetUnreached { reached: f64, target: f64 },

    #[error("back-merge loop did not terminate at step {step} after {merges} merges (distance {distance})")]
    MergeLoopRunaway {
        step: u64,
        merges: u32,
        distance: f64,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::Domain(_)
                | Error::Incompatible { .. }
                | Error::CountMismatch { .. }
                | Error::TokenOutOfRange { .. }
                | Error::EmptyBatch
                | Error::EmptyEvalSet
        )
    }
}
