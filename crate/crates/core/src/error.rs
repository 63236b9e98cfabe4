use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("behavior policy assigns zero probability to recorded action {action} in state {state}")]
    ZeroBehaviorProbability { state: usize, action: usize },

    #[error("trajectory enumeration exceeded the cap of {cap} trajectories")]
    EnumerationCapExceeded { cap: usize },

    #[error("every action of state {state} appears in the buffer; no mass left to renormalize")]
    AllActionsSampled { state: usize },

    #[error("all importance weights are zero")]
    AllWeightsZero,

    #[error("empty replay buffer")]
    EmptyBuffer,

    #[error("invalid argument `{name}`: {reason}")]
    Domain { name: &'static str, reason: String },

    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: usize },

    #[error("I/O error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn domain(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Domain { name, reason: reason.into() }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}
