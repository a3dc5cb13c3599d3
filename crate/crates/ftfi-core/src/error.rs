//! Crate-wide error type.
//!
//! Solver non-convergence is *not* an error: solvers return a result with
//! `converged = false`. Errors are reserved for malformed inputs, exceeded
//! enumeration caps, impossible observations, and internal cross-check
//! failures.

/// Errors produced by model loading, validation, and the exact evaluators.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// The input file or string could not be parsed at all.
    #[error("parse error: {0}")]
    Parse(String),

    /// A structural or numerical invariant failed; `location` names the
    /// offending index or field.
    #[error("validation error at {location}: {message}")]
    Validation { location: String, message: String },

    /// An enumeration (states, histories, joint support) would exceed the
    /// configured cap.
    #[error("cap exceeded: enumeration needs {needed} entries, cap is {cap}")]
    CapExceeded { needed: u128, cap: u128 },

    /// An observed output symbol has zero predictive probability under the
    /// current model/policy pair.
    #[error("impossible observation: output symbol {symbol} has zero predictive mass at step {step}")]
    ZeroMassObservation { step: usize, symbol: usize },

    /// Two independent computation paths disagreed beyond tolerance.
    #[error("internal consistency failure in {context}: paths differ by {delta:e}")]
    PathInconsistency { context: String, delta: f64 },

    /// The requested operation is outside the supported feature set.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// The constrained problem has no feasible policy/strategy.
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// A matrix operation failed (singularity, non-convergent eigensolve).
    #[error("numeric failure at {location}: {message}")]
    Numeric { location: String, message: String },
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand for a validation error.
    pub fn validation(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation { location: location.into(), message: message.into() }
    }
}
