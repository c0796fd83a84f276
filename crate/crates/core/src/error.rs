use thiserror::Error;

/// Errors raised by the library.
///
/// Variants are grouped by what the caller can do about them: bad input
/// (`InvalidInput`, `Precondition`), numerical breakdown of a model
/// (`DegenerateTilt`, `NonFinite*`, `IncompatiblePotentials`), or a solver
/// that did not reach its target (`DualUnbounded`, `NotConverged`,
/// `FixedPointNotReached`). `IdentityViolation` signals an internal bug.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("degenerate tilt: every potential is infinite")]
    DegenerateTilt,

    #[error("node index {index} out of range (grid has {len} nodes)")]
    NodeOutOfRange { index: usize, len: usize },

    #[error("non-finite drift at t={t}, x={x:?}")]
    NonFiniteDrift { t: f64, x: Vec<f64> },

    #[error("non-finite constraint value at path {path}, node {node}")]
    NonFiniteConstraint { path: usize, node: usize },

    #[error("non-finite integrand: {0}")]
    NonFiniteIntegrand(String),

    #[error("dual unbounded or infeasible primal: multiplier mass {mass} exceeded cap {cap}")]
    DualUnbounded { mass: f64, cap: f64 },

    #[error("not converged after {iterations} iterations: {detail}")]
    NotConverged { iterations: usize, detail: String },

    #[error("fixed point not reached: {0}")]
    FixedPointNotReached(String),

    #[error("incompatible potentials: all path mass annihilated")]
    IncompatiblePotentials,

    #[error("equivalence violated: {0}")]
    EquivalenceViolation(String),

    #[error("constraint too rare at this N; increase epsilon ({accepted} accepted out of {drawn} blocks)")]
    ConstraintTooRare { accepted: usize, drawn: usize },

    #[error("internal identity violated: {0}")]
    IdentityViolation(String),
}

pub type Result<T> = std::result::Result<T, Error>;
