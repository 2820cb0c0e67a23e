use std::path::PathBuf;

use thiserror::Error;

use crate::policy::PolicyError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {message}")]
    Parse { context: String, message: String },

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("missing column `{column}` in {context}")]
    MissingColumn { context: String, column: String },

    /// A row failed validation. `row` is the 1-based data row number.
    #[error("row {row} (sample `{sample_id}`){}: {message}", feature.as_ref().map(|f| format!(", feature `{f}`")).unwrap_or_default())]
    InvalidRecord {
        row: usize,
        sample_id: String,
        feature: Option<String>,
        message: String,
    },

    #[error("integer-kind feature value {0} is not a whole number")]
    NotWhole(f64),

    #[error("expected {expected} values, got {got}")]
    Arity { expected: usize, got: usize },

    #[error("feature `{0}` has no stored intervals")]
    EmptySubBase(String),

    #[error("failure case rejected: diff {0} is within the acceptance band")]
    NotAFailure(f64),

    #[error("policy failed at iteration {iteration}: {source}")]
    Policy {
        iteration: usize,
        #[source]
        source: PolicyError,
    },

    #[error("retrieval: knowledge base is empty")]
    EmptyStore,

    #[error(
        "retrieval: no precedent passed the similarity threshold and global fallback is disabled"
    )]
    NoPrecedents,

    #[error("refusing to store unconverged outcome for `{0}` (include_unconverged is off)")]
    Unconverged(String),

    #[error("store format version {found} is not supported (expected {expected})")]
    StoreVersion { found: u32, expected: u32 },

    #[error("store checksum mismatch: header says {expected}, payload hashes to {actual}")]
    Checksum { expected: String, actual: String },

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("coalition enumeration supports at most {max} features, got {got}")]
    TooManyFeatures { max: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("vote aborted: run {failed_run} failed after {} completed run(s): {source}", completed.len())]
    Vote {
        failed_run: usize,
        completed: Vec<crate::prediction::PredictionRun>,
        #[source]
        source: Box<Error>,
    },

    #[error("{0} needs at least one value")]
    EmptyInput(&'static str),

    #[error("embedding: {0}")]
    Embedding(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }
}
