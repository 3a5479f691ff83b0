// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the engine and the experiment pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("sequence of length {len} exceeds context length {context}")]
    ContextOverflow { len: usize, context: usize },

    #[error("token id {0} is outside the vocabulary")]
    UnknownToken(u32),

    #[error("invalid intervention: {0}")]
    Intervention(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("empty objective: {0}")]
    EmptyObjective(String),

    #[error("invalid label: {0}")]
    Label(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("missing artifact `{name}` at {path}")]
    MissingArtifact { name: String, path: PathBuf },

    #[error("hash mismatch for {path}: manifest says {expected}, file is {actual}")]
    HashMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("stage `{stage}` cannot run: {reason}")]
    Stage { stage: String, reason: String },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
