//! File formats and IO around `vtloc-core`: binary feature files,
//! annotation JSON, model checkpoints, evaluation reports, prediction
//! dumps and loss curves.

pub mod annotations;
pub mod checkpoint;
pub mod dataset;
pub mod features;
pub mod predictions;
pub mod report;

pub use vtloc_core as core;

/// Errors shared by the format readers and writers.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}: bad magic at byte 0 (expected {expected:?})")]
    BadMagic { path: String, expected: &'static str },
    #[error("{path}: unsupported version {version} at byte {offset}")]
    BadVersion { path: String, version: u32, offset: usize },
    #[error("{path}: truncated payload at byte {offset} (needed {needed} more)")]
    Truncated { path: String, offset: usize, needed: usize },
    #[error("{path}: invalid field {field} at byte {offset}: {message}")]
    InvalidField { path: String, field: &'static str, offset: usize, message: String },
    #[error("{path}: trailing {extra} bytes after payload")]
    TrailingBytes { path: String, extra: usize },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}
