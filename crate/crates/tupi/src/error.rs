use thiserror::Error;

/// Unified error type for the whole crate.
#[derive(Debug, Error)]
pub enum TupiError {
    /// A scale estimate collapsed: all relevant pairwise distances are
    /// (numerically) zero, so no kernel bandwidth can be formed.
    #[error("degenerate scale: {0}")]
    DegenerateScale(String),

    /// Shape or value preconditions violated (dimension mismatch, NaN input,
    /// empty data, out-of-range index, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A kernel matrix has no variation left after centering, so it cannot
    /// be normalized onto the unit sphere.
    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    /// Basis selection found no spread to span (all rows identical, or a
    /// numerically empty 1-d range).
    #[error("degenerate range: {0}")]
    DegenerateRange(String),

    /// The basis kernel matrix is not invertible even with jitter
    /// (coincident basis points).
    #[error("singular basis: {0}")]
    SingularBasis(String),

    /// A linear solve or factorization failed.
    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// No strictly ordered pairs can be formed from the given scores.
    #[error("no ordered pairs: {0}")]
    NoOrderedPairs(String),

    /// Malformed external data (CSV / pairs / config files).
    #[error("parse error at {location}: {message}")]
    ParseError { location: String, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TupiError>;

impl TupiError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        TupiError::InvalidInput(msg.into())
    }

    pub fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        TupiError::ParseError {
            location: location.into(),
            message: message.into(),
        }
    }
}
