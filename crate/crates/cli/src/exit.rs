//! Process exit codes.

use std::fmt;

use cocotree::Error;

pub const OK: i32 = 0;
pub const USAGE: i32 = 1;
pub const DATASET: i32 = 2;
pub const BACKEND: i32 = 3;
pub const INVARIANT: i32 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(USAGE, message)
    }

    pub fn dataset(message: impl Into<String>) -> Self {
        Self::new(DATASET, message)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub fn code_for(error: &Error) -> i32 {
    match error {
        Error::InvalidInput(_) | Error::Precondition(_) | Error::Cache { .. } | Error::Io(_) => USAGE,
        Error::Dataset(_) | Error::Schema(_) | Error::IncompleteInput(_) | Error::RunFailed { .. } => {
            DATASET
        }
        Error::BackendUnavailable { .. }
        | Error::Protocol { .. }
        | Error::EmptyGeneration { .. }
        | Error::Parse(_)
        | Error::DecompositionFailed { .. }
        | Error::ExpansionFailed { .. } => BACKEND,
        Error::Sample { source, .. } | Error::Scoring { source, .. } => code_for(source),
        Error::IncompleteScores(_) | Error::Invariant(_) | Error::Json(_) => INVARIANT,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self::new(code_for(&e), e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::usage(e.to_string())
    }
}
