//! Rare event probability estimation by Stein variational particle
//! transport.
//!
//! Particles drawn from the standard-normal input density are pushed
//! through a sequence of kernelized velocity-field transforms toward a
//! smoothed optimal importance sampling density. Every transform is close
//! to the identity, so particle densities can be tracked through the
//! Jacobian determinants; the final generation of independent estimation
//! samples yields an unbiased importance sampling estimate of the failure
//! probability together with its coefficient of variation.
//!
//! Modules:
//! - [`lsf`]: limit-state abstractions and the analytic benchmark problems
//! - [`smoothing`]: logistic relaxation of the failure indicator
//! - [`kernel`]: Gaussian RBF kernel, derivatives, bandwidth selection
//! - [`ensemble`]: particle state and low-discrepancy initialization
//! - [`transport`]: one transport step with density tracking
//! - [`estimator`]: the full driver, stopping rule and the IS estimate
//! - [`darcy`]: 1-D Darcy flow benchmark with a Karhunen-Loeve field
//! - [`oracle`]: crude Monte Carlo and semi-analytic references, rRMSE
//! - [`config`]: problem registry and run configuration

pub mod config;
pub mod darcy;
pub mod ensemble;
pub mod error;
pub mod estimator;
pub mod kernel;
pub mod lsf;
pub mod oracle;
pub mod smoothing;
pub mod stats;
pub mod transport;

pub use config::{ProblemSpec, RunConfig};
pub use ensemble::{init_ensemble, Ensemble, InitScheme};
pub use error::{Result, SvreError};
pub use estimator::{
    is_estimate, run_svre, weight_cov_stat, EstimateReport, SvreConfig, Termination,
};
pub use kernel::{median_bandwidth, BandwidthStrategy, KernelConfig};
pub use lsf::{
    fourbranch_branch_gap, fourbranch_lsf, gradient_check, linear_lsf, quadratic_lsf, EvalRecord,
    LimitStateProblem,
};
pub use oracle::{crude_mc, quadratic_reference, rrmse, BenchmarkResult};
pub use smoothing::{
    log_smooth_indicator_grad, mu_from_mass, smooth_indicator, SmootherParams,
};
pub use transport::{
    adaptive_base_rate, l2_rates, logdet_update, rmsprop_rates, score_target, stein_velocity,
    transport_step, DetMode, Normalization, RatePolicy, StepDiagnostics, TransportConfig,
    VelocityField,
};
