use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the reasoning pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("backend `{backend}` unavailable after {attempts} attempt(s): {message}")]
    BackendUnavailable {
        backend: String,
        attempts: u32,
        message: String,
    },

    #[error("protocol error from `{backend}`: {message}")]
    Protocol { backend: String, message: String },

    #[error("backend `{backend}` produced an empty generation")]
    EmptyGeneration { backend: String },

    #[error("could not parse numbered list: {0}")]
    Parse(String),

    #[error("decomposition of `{caption}` failed: {reason}")]
    DecompositionFailed { caption: String, reason: String },

    #[error("expansion of `{node}` failed: {reason}")]
    ExpansionFailed { node: String, reason: String },

    #[error("scoring failed after {scored} node(s): {source}")]
    Scoring {
        scored: usize,
        partial: Box<crate::tree::TreeScores>,
        #[source]
        source: Box<Error>,
    },

    #[error("node {0} has no score")]
    IncompleteScores(u32),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("incomplete input: {0}")]
    IncompleteInput(String),

    #[error("sample `{id}`: {source}")]
    Sample {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("run failed: {failed} of {total} samples errored")]
    RunFailed { failed: usize, total: usize },

    #[error("cache error at {path}: {message}")]
    Cache { path: PathBuf, message: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures that originate at a model endpoint.
    pub fn is_backend(&self) -> bool {
        match self {
            Error::BackendUnavailable { .. }
            | Error::Protocol { .. }
            | Error::EmptyGeneration { .. }
            | Error::Cache { .. } => true,
            Error::Sample { source, .. } | Error::Scoring { source, .. } => source.is_backend(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
