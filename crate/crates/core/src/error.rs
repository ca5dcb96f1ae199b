use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A resolvent was requested at (or within 1e-12 of) a point of the spectrum.
    #[error("resolvent pole: {lambda} lies within 1e-12 of eigenvalue {eigenvalue}")]
    Pole { lambda: String, eigenvalue: f64 },

    #[error("coordinate basis is degenerate: Gram condition number {condition:.3e} exceeds 1e8")]
    DegenerateBasis { condition: f64 },

    #[error("contour passes within {distance:.3e} of the spectrum (minimum 1e-6)")]
    ContourTooClose { distance: f64 },

    #[error("certificate violated for {constant}: empirical {empirical:.6e} > certified {certified:.6e}")]
    CertificateViolation {
        constant: &'static str,
        empirical: f64,
        certified: f64,
    },

    #[error("trajectory blow-up at s = {time:.4}: norm {norm:.6e} exceeds guard {limit:.6e}")]
    Blowup { time: f64, norm: f64, limit: f64 },

    #[error("truncation tail {tail:.3e} exceeds tail budget {budget:.3e}")]
    TailBudget { tail: f64, budget: f64 },

    #[error("fixed-point iteration not contracting{context}: {reason}")]
    NoContraction { reason: String, context: String },

    #[error("gap conditions fail{context}: {reason}")]
    GapCondition { reason: String, context: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("schema mismatch: expected {expected}, found {found}")]
    Schema { expected: String, found: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Tags contraction and gap failures with the perturbation parameter they occurred at.
    pub fn at_eps(self, eps: f64) -> Self {
        let context = format!(" at eps = {eps:e}");
        match self {
            Error::NoContraction { reason, .. } => Error::NoContraction { reason, context },
            Error::GapCondition { reason, .. } => Error::GapCondition { reason, context },
            other => other,
        }
    }
}
