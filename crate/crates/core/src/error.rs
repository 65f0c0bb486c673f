use std::fmt;
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Pipeline stage names used to tag errors surfaced by [`crate::pipeline`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Route,
    Embed,
    Retrieve,
    Generate,
    Score,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Route => "route",
            Stage::Embed => "embed",
            Stage::Retrieve => "retrieve",
            Stage::Generate => "generate",
            Stage::Score => "score",
        })
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: malformed record: {message}")]
    MalformedRecord { line: usize, message: String },

    #[error("line {line}: duplicate document id {id:?}")]
    DuplicateId { id: String, line: usize },

    #[error("line {line}: document {id:?} has modality {found}, expected {expected}")]
    ModalityMismatch {
        id: String,
        line: usize,
        expected: String,
        found: String,
    },

    #[error("invalid document {id:?}: {reason}")]
    InvalidDocument { id: String, reason: String },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("cannot normalize a zero vector")]
    ZeroVector,

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("request timed out after {0:?}")]
    Timeout(Duration),

    #[error("http status {status}: {body}")]
    HttpStatus { status: u16, body: String },

    #[error("malformed response: {0}")]
    MalformedResponse(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("class {0} has no training examples")]
    MissingClass(String),

    #[error("unknown label {0:?}")]
    UnknownLabel(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("embedding failed for document {id:?}: {source}")]
    EmbedDocument {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("query {0:?} has no relevance judgments")]
    MissingQrels(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn at(self, stage: Stage) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The stage an error was tagged with, if any.
    pub fn stage(&self) -> Option<Stage> {
        match self {
            Error::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }

    /// Short stable identifier, used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::MalformedRecord { .. } => "malformed_record",
            Error::DuplicateId { .. } => "duplicate_id",
            Error::ModalityMismatch { .. } => "modality_mismatch",
            Error::InvalidDocument { .. } => "invalid_document",
            Error::EmptyInput(_) => "empty_input",
            Error::ZeroVector => "zero_vector",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::Transport(_) => "transport",
            Error::Timeout(_) => "timeout",
            Error::HttpStatus { .. } => "http_status",
            Error::MalformedResponse(_) => "malformed_response",
            Error::Config(_) => "config",
            Error::MissingClass(_) => "missing_class",
            Error::UnknownLabel(_) => "unknown_label",
            Error::Format(_) => "format",
            Error::EmbedDocument { .. } => "embed_document",
            Error::MissingQrels(_) => "missing_qrels",
            Error::Stage { .. } => "stage",
            Error::Invalid(_) => "invalid",
        }
    }
}
