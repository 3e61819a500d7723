//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SvreError {
    /// A configuration value violates its documented constraint.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A problem was constructed with inconsistent parameters.
    #[error("invalid problem definition: {0}")]
    Problem(String),

    /// The limit state or its gradient returned a non-finite value.
    #[error("non-finite model output at iteration {iteration}: {detail}")]
    NonFinite { iteration: usize, detail: String },

    /// All pairwise distances in the ensemble are zero.
    #[error("degenerate ensemble: all samples coincide, median bandwidth undefined")]
    DegenerateEnsemble,

    /// A particle transform stopped being invertible even at the smallest
    /// admissible base learning rate.
    #[error("transform not invertible at iteration {iteration} (base rate shrunk to {base_rate:.3e})")]
    TransformNotInvertible { iteration: usize, base_rate: f64 },

    /// The adaptive base rate collapsed below the minimum admissible value.
    #[error("step collapse at iteration {iteration}: largest admissible base rate {base_rate:.3e} < 1e-6")]
    StepCollapse { iteration: usize, base_rate: f64 },

    /// Tracked particle densities became non-finite.
    #[error("non-finite tracked density at iteration {iteration}")]
    NonFiniteDensity { iteration: usize },

    /// No run survived the exclusion rule of a benchmark.
    #[error("benchmark degenerate: {0}")]
    BenchmarkDegenerate(String),

    /// A numerical routine failed to converge.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, SvreError>;
