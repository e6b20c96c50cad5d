//! Error type shared across the crate.

use thiserror::Error;

/// Errors raised by modal analysis, dataset generation and the estimation
/// pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A matrix or signal contains NaN or infinite entries.
    #[error("non-finite values in {context}")]
    NonFinite { context: String },

    /// Eigenvalues coincide and the eigenvector matrix is numerically
    /// singular, so no complete eigenbasis exists.
    #[error("matrix is defective: eigenvalues {lambda_a} and {lambda_b} coincide and the eigenvector matrix is singular")]
    DefectiveMatrix { lambda_a: String, lambda_b: String },

    /// Operand shapes do not agree.
    #[error("dimension mismatch: expected {expected}, got {got} in {context}")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: String,
    },

    /// A participation column has no nonzero magnitude to normalize by.
    #[error("all magnitudes in column {column} are below {floor}")]
    ZeroColumn { column: usize, floor: f64 },

    /// Sample timestamps are not uniformly spaced.
    #[error("time grid is not uniform at index {index}")]
    NonUniformTimes { index: usize },

    /// Numerical integration left the trusted range.
    #[error("integration blow-up: |x| exceeded {limit:e} at step {step}")]
    IntegrationBlowUp { limit: f64, step: usize },

    /// The requested fit order needs more samples than provided.
    #[error("order {order} requires at least {required} samples, got {got}")]
    OrderTooHigh {
        order: usize,
        required: usize,
        got: usize,
    },

    /// A linear system in the fit is too ill-conditioned to solve reliably.
    #[error("{system} system is ill-conditioned: cond = {cond:e} exceeds {bound:e}")]
    IllConditioned {
        system: String,
        cond: f64,
        bound: f64,
    },

    /// A reference mode has no acceptable partner among fitted modes.
    #[error("no fitted mode matches reference eigenvalue {lambda} within tolerance")]
    NoMatch { lambda: String },

    /// A spatial index cannot be built from zero points.
    #[error("cannot build index from an empty point set")]
    EmptyInput,

    /// The queried state itself violates the norm threshold.
    #[error("query norm {norm} does not exceed r_threshold {threshold}")]
    BelowThreshold { norm: f64, threshold: f64 },

    /// No indexed point satisfies the feasibility constraints.
    #[error("no feasible symmetric peer: {reason}")]
    NoFeasiblePeer { reason: String },

    /// Fewer acceptable symmetric pairs than the transformation needs.
    #[error("only {found} acceptable symmetric pairs, need at least {needed}")]
    InsufficientPairs { found: usize, needed: usize },

    /// No vertex selection meets the conditioning bound.
    #[error("degenerate vertex geometry: best achievable cond = {best_cond:e} exceeds bound {bound:e}")]
    DegenerateGeometry { best_cond: f64, bound: f64 },

    /// The edge matrix is not invertible.
    #[error("edge matrix is singular within tolerance")]
    SingularEdgeMatrix,

    /// Every segment was excluded for a (state, mode) entry.
    #[error("no valid segments for state {state}, mode {mode}: all initial components below floor")]
    NoValidSegments { state: usize, mode: usize },

    /// Fewer modes were identifiable than the full-observability path needs.
    #[error("only {identified} of {needed} modes identifiable; use the partial-observability path")]
    PartialObservability { identified: usize, needed: usize },

    /// A mode-shape divisor is numerically zero.
    #[error("mode shape entry for state {state}, mode {mode} is below the divisor floor")]
    ShapeElementNearZero { state: usize, mode: usize },

    /// Sub-space groups do not jointly cover the requested states.
    #[error("sub-space groups leave states uncovered or unlinkable: {detail}")]
    DisconnectedGroups { detail: String },

    /// e2 needs four nonzero magnitudes.
    #[error("zero denominator in ratio error index for states ({i}, {j})")]
    ZeroDenominator { i: usize, j: usize },

    /// A referenced mode frequency has no counterpart.
    #[error("no mode within {tol} Hz of requested {hz} Hz")]
    NoTrackedMode { hz: f64, tol: f64 },

    /// Underlying LAPACK failure.
    #[error("linear algebra backend error: {0}")]
    Backend(#[from] ndarray_linalg::error::LinalgError),

    /// Malformed input file.
    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },

    /// Filesystem failure.
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
