use thiserror::Error;

/// Errors raised while building models, running ensembles and checks.
#[derive(Debug, Error)]
pub enum Error {
    /// A truncated space would exceed the configured dimension limit.
    #[error("sizing: {what} has dimension {product}, limit is {limit}")]
    Sizing {
        what: String,
        product: usize,
        limit: usize,
    },

    #[error("unknown mode {0}")]
    UnknownMode(String),

    #[error("model: {0}")]
    Model(String),

    #[error("domain: {0}")]
    Domain(String),

    /// The integration disc or search segment does not cover the thermal support.
    #[error("coverage: {0}")]
    Coverage(String),

    /// Basis factorization or dimension mismatch between operands.
    #[error("structure: {0}")]
    Structural(String),

    #[error("numerical consistency: {0}")]
    Numerical(String),

    #[error("precondition: {0}")]
    Precondition(String),

    #[error("config: {0}")]
    Config(String),

    #[error("linear algebra: {0}")]
    Linalg(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
