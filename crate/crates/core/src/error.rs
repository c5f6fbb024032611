use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("unknown topology kind `{0}` (expected ring, dense or bipartite)")]
    UnknownTopology(String),

    #[error("invalid agent count {n} for {what}")]
    InvalidAgentCount { what: &'static str, n: usize },

    #[error("graph is disconnected")]
    Disconnected,

    #[error("power iteration did not converge after {0} iterations")]
    NoConvergence(usize),

    #[error("action index {0} out of range")]
    ActionOutOfRange(usize),

    #[error("expected {expected} actions, got {got}")]
    JointActionLength { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty batch")]
    EmptyBatch,

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("invalid config: {key} {reason}")]
    InvalidConfig { key: &'static str, reason: String },

    #[error("parameters diverged at iteration {iteration}, agent {agent}: {what}")]
    Diverged {
        iteration: usize,
        agent: usize,
        what: &'static str,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn ensure_len(what: &'static str, left: usize, right: usize) -> Result<()> {
    if left == right {
        Ok(())
    } else {
        Err(Error::LengthMismatch { what, left, right })
    }
}
