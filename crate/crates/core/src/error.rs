use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("loss node is not a scalar (shape {0:?})")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("token id {token} at position {position} is outside vocabulary of size {vocab}")]
    TokenOutOfRange {
        position: usize,
        token: u32,
        vocab: usize,
    },

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("sequence too short: {0}")]
    SequenceTooShort(String),

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("profile mismatch: {0}")]
    ProfileMismatch(String),

    #[error("invalid prune criterion: {0}")]
    InvalidCriterion(String),

    #[error("stale redundancy set: {0}")]
    StaleRedundancySet(String),

    #[error("non-finite advantage in group {0}")]
    NonFiniteAdvantage(usize),

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated checkpoint payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("malformed checkpoint header: {0}")]
    MalformedHeader(String),

    #[error("checkpoint invariant violated: {0}")]
    CheckpointInvariant(String),

    #[error("vocabulary cannot express `{0}`")]
    Unexpressible(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("round {round} failed: {source}")]
    RoundFailed {
        round: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier, used for machine-readable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidTensor(_) => "invalid_tensor",
            Error::NonFiniteGradient(_) => "non_finite_gradient",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::InvalidConfig(_) => "invalid_config",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::SequenceTooLong { .. } => "sequence_too_long",
            Error::SequenceTooShort(_) => "sequence_too_short",
            Error::EmptyCorpus(_) => "empty_corpus",
            Error::ProfileMismatch(_) => "profile_mismatch",
            Error::InvalidCriterion(_) => "invalid_criterion",
            Error::StaleRedundancySet(_) => "stale_redundancy_set",
            Error::NonFiniteAdvantage(_) => "non_finite_advantage",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::TruncatedPayload { .. } => "truncated_payload",
            Error::MalformedHeader(_) => "malformed_header",
            Error::CheckpointInvariant(_) => "checkpoint_invariant",
            Error::Unexpressible(_) => "unexpressible",
            Error::Parse(_) => "parse",
            Error::Io { .. } => "io",
            Error::RoundFailed { .. } => "round_failed",
        }
    }
}
