use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum DiorError {
    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("validation error for item `{item}`{}: {message}", condition.as_ref().map(|c| format!(" (condition `{c}`)")).unwrap_or_default())]
    Validation {
        item: String,
        condition: Option<String>,
        message: String,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("prefix cache does not match the sequence it is applied to: {0}")]
    CacheMismatch(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("cannot split class `{class}`: {message}")]
    Split { class: String, message: String },

    #[error("no label for id `{id}`")]
    MissingLabel { id: String },

    #[error("store format error: {0}")]
    StoreFormat(String),

    #[error("store corrupted at byte offset {offset}: {message}")]
    Corruption { offset: u64, message: String },

    #[error("refusing to overwrite existing file {}", .0.display())]
    Refused(PathBuf),

    #[error("instance too large for brute-force oracle: {0} items (max 200)")]
    TooLarge(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DiorError> = std::result::Result<T, E>;
