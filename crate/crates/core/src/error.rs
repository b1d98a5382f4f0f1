use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside the domain of the function it was passed to.
    #[error("domain error: {0}")]
    Domain(String),
    /// Two inputs that must agree in length did not.
    #[error("length mismatch: {what} (expected {expected}, got {got})")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    /// A state or action index was out of range.
    #[error("index out of range: {0}")]
    Index(String),
    /// A linear or iterative solve did not reach the requested accuracy.
    #[error("solve did not converge (residual {residual:e})")]
    NotConverged { residual: f64 },
    /// Sampling from an empty replay buffer.
    #[error("replay buffer is empty")]
    EmptyBuffer,
    /// A strategy name that is not present in a registry.
    #[error("unknown {kind} `{name}` (known: {known})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        known: String,
    },
    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),
    /// A loss or gradient became NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),
    /// Malformed checkpoint or replay dump.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
