//! Error type shared by all modules.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter value lies outside the declared parameter domain.
    #[error("parameter {mu:?} outside domain {domain}")]
    OutOfDomain { mu: Vec<f64>, domain: String },

    /// A query point lies outside the convex hull of a training grid.
    #[error("parameter {mu:?} outside the training hull {hull}; extrapolation is not supported")]
    Extrapolation { mu: Vec<f64>, hull: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// Matrix/manifest ingestion failure; always names the offending file.
    #[error("ingestion error in {file}: {reason}")]
    Ingestion { file: String, reason: String },

    #[error("solver error: {0}")]
    Solver(String),

    /// Iteration hit its step cap; carries the last relative residual.
    #[error("no convergence within {steps} steps (last relative residual {residual:.3e})")]
    Convergence { steps: usize, residual: f64 },

    /// Requested operation exceeds the dense desk-scale guard.
    #[error("size guard: {0}")]
    SizeGuard(String),

    /// Polar decomposition of a (near-)singular matrix; the manifold log is
    /// not defined there.
    #[error("ill-defined polar decomposition: {0}")]
    IllDefinedPolar(String),

    /// An exponential-map result left the fixed-rank manifold.
    #[error("off-manifold result: {0}")]
    OffManifold(String),

    /// All Hankel singular values vanished.
    #[error("degenerate system: {0}")]
    Degenerate(String),

    /// Retained singular values too small for a stable projection.
    #[error("ill-conditioned truncation: {0}")]
    IllConditioned(String),

    #[error("evaluation failed at frequency {omega}: {reason}")]
    Frequency { omega: f64, reason: String },

    /// Error context for failures at a specific training node.
    #[error("at training node {index} (mu = {mu:?}): {source}")]
    AtNode {
        index: usize,
        mu: Vec<f64>,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {path}: {reason}")]
    Json { path: String, reason: String },
}

impl Error {
    pub fn at_node(self, index: usize, mu: &[f64]) -> Error {
        Error::AtNode {
            index,
            mu: mu.to_vec(),
            source: Box::new(self),
        }
    }
}
