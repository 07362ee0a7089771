use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the harness modules.
///
/// Provider degradations inside the matcher are not errors; they travel as
/// flags on [`crate::matcher::MatchOutcome`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("store unavailable at {path}: {source}")]
    StoreUnavailable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("skill not found: {0}")]
    SkillNotFound(String),

    #[error("malformed skill: {0}")]
    MalformedSkill(String),

    #[error("invalid user id {0:?}: must match [A-Za-z0-9_-]{{1,64}}")]
    InvalidUserId(String),

    #[error("behavior suggestion must be confirmed before it is applied")]
    ConfirmationRequired,

    #[error("suggestion not found: {0}")]
    SuggestionNotFound(String),

    #[error("vector dimensions differ: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("compression failed: {0}")]
    CompressionFailed(String),

    #[error(transparent)]
    Provider(#[from] ProviderError),

    #[error("sub-agent misconfigured: {0}")]
    SubAgentConfig(String),

    #[error("illegal session phase: expected {expected}, found {found}")]
    IllegalPhase { expected: String, found: String },

    #[error("evolution deferred: {0}")]
    EvolutionDeferred(String),

    #[error("replay failed at line {line}: {reason}")]
    Replay { line: usize, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("session not found: {0}")]
    SessionNotFound(String),

    #[error("no turn at index {0}")]
    TurnNotFound(u64),

    #[error("turn at index {0} did not use a skill")]
    TurnWithoutSkill(u64),

    #[error("session log error: {0}")]
    SessionLog(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure reported by a chat or embedding backend.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ProviderError {
    #[error("provider unavailable: {0}")]
    Unavailable(String),
    #[error("provider returned an invalid response: {0}")]
    InvalidResponse(String),
    #[error("mock transcript exhausted")]
    TranscriptExhausted,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::StoreUnavailable {
            path: path.into(),
            source,
        }
    }
}
