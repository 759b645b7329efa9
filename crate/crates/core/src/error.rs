//! Crate-wide error type and process exit-code mapping.

use thiserror::Error;

use crate::judge::JudgmentReplicate;
use crate::model::Condition;

/// Errors produced anywhere in the harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Input data or configuration violates a documented invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// Model output could not be parsed into the expected structure.
    #[error("parse error: {message}; raw excerpt: {excerpt:?}")]
    Parse { message: String, excerpt: String },

    /// Replay-mode lookup found no recorded response for the request key.
    #[error("cassette miss for key {key}")]
    CassetteMiss { key: String },

    /// Network-level failure after exhausting retries.
    #[error("transport error: {0}")]
    Transport(String),

    /// Server returned a non-success status after exhausting retries.
    #[error("status error {status}: {body_excerpt}")]
    Status { status: u16, body_excerpt: String },

    /// Checklist generation exhausted its attempt budget.
    #[error("checklist generation failed for instance {instance_id} ({policy}) after {} attempts", raw_outputs.len())]
    GenerationFailure {
        instance_id: String,
        policy: String,
        raw_outputs: Vec<String>,
    },

    /// One or more replicates in a judgment set exhausted their retries.
    #[error("partial judgment set for instance {instance_id}: replicates {failed_indices:?} failed")]
    PartialSet {
        instance_id: String,
        condition: Condition,
        failed_indices: Vec<u8>,
        completed: Vec<JudgmentReplicate>,
    },

    /// Caller violated an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for this error: 1 validation, 2 transport/cassette,
    /// 3 partial failure, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Transport(_) | Error::Status { .. } | Error::CassetteMiss { .. } => 2,
            Error::PartialSet { .. } | Error::GenerationFailure { .. } => 3,
            _ => 1,
        }
    }

    pub(crate) fn parse(message: impl Into<String>, raw: &str) -> Self {
        Error::Parse {
            message: message.into(),
            excerpt: excerpt(raw),
        }
    }
}

/// First 200 chars of a raw model output, for error messages.
pub(crate) fn excerpt(raw: &str) -> String {
    let mut s: String = raw.chars().take(200).collect();
    if raw.chars().count() > 200 {
        s.push_str("...");
    }
    s
}

pub type Result<T> = std::result::Result<T, Error>;
