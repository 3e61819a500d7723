//! The full estimator: initialization, transport loop with stopping rule,
//! and the unbiased importance sampling estimate with its coefficient of
//! variation.

use serde::{Deserialize, Serialize};

use crate::ensemble::{init_ensemble, InitScheme};
use crate::error::{Result, SvreError};
use crate::kernel::KernelConfig;
use crate::lsf::LimitStateProblem;
use crate::smoothing::SmootherParams;
use crate::stats::log_std_normal;
use crate::transport::{transport_step, Normalization, StepDiagnostics, TransportConfig};

/// All algorithm knobs for one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SvreConfig {
    /// Estimation sample count.
    pub n: usize,
    /// Inducing sample count (gradients per iteration).
    #[serde(default = "default_n_grad")]
    pub n_grad: usize,
    /// Stopping threshold on the weight coefficient of variation.
    #[serde(default = "default_delta_thresh")]
    pub delta_thresh: f64,
    /// Iteration cap.
    #[serde(default = "default_t_max")]
    pub t_max: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_init")]
    pub init: InitScheme,
    #[serde(default)]
    pub smoother: SmootherParams,
    /// Defaults to fixed l = 10 under l2 normalization and the median
    /// heuristic under RMSProp.
    #[serde(default)]
    pub kernel: Option<KernelConfig>,
    pub transport: TransportConfig,
}

fn default_n_grad() -> usize {
    20
}

fn default_delta_thresh() -> f64 {
    5.0
}

fn default_t_max() -> usize {
    200
}

fn default_init() -> InitScheme {
    InitScheme::Sobol
}

impl SvreConfig {
    /// Paper-style defaults around a chosen normalization scheme.
    pub fn new(n: usize, transport: TransportConfig) -> Self {
        SvreConfig {
            n,
            n_grad: default_n_grad(),
            delta_thresh: default_delta_thresh(),
            t_max: default_t_max(),
            seed: 0,
            init: default_init(),
            smoother: SmootherParams::default(),
            kernel: None,
            transport,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn resolved_kernel(&self) -> KernelConfig {
        self.kernel.unwrap_or(match self.transport.normalization {
            Normalization::L2 => KernelConfig::fixed(10.0),
            Normalization::Rmsprop => KernelConfig::median(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(SvreError::Config(format!("svre.n must be >= 2, got {}", self.n)));
        }
        if self.n_grad < 1 {
            return Err(SvreError::Config(format!(
                "svre.n_grad must be >= 1, got {}",
                self.n_grad
            )));
        }
        if !(self.delta_thresh > 0.0) {
            return Err(SvreError::Config(format!(
                "svre.delta_thresh must be > 0, got {}",
                self.delta_thresh
            )));
        }
        let mut smoother = self.smoother;
        smoother.finalize()?;
        self.resolved_kernel().validate()?;
        self.transport.validate()
    }
}

/// Why a run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIterations,
    Aborted,
}

/// Result of one run.
#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    /// Failure probability estimate; absent for aborted runs.
    pub p_hat: Option<f64>,
    /// Estimator coefficient of variation; absent for aborted runs,
    /// infinite when no estimation sample failed.
    pub delta_hat: Option<f64>,
    pub iterations: usize,
    pub model_calls: u64,
    pub gradient_calls: u64,
    pub termination: Termination,
    /// Weight coefficient of variation on the inducing set at the last
    /// completed iteration.
    pub delta_w: Option<f64>,
    pub seed: u64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    /// Importance weights of the estimation samples.
    pub weights: Vec<f64>,
    /// Final estimation-sample positions.
    pub final_positions: Vec<Vec<f64>>,
    /// Per-step transport diagnostics.
    pub steps: Vec<StepDiagnostics>,
}

/// Unbiased importance sampling estimate from hard-indicator weights
/// w_i = I[g_i <= 0] p0(x_i) / q(x_i).
///
/// Returns (p_hat, delta_hat, weights); delta_hat is infinite when every
/// weight vanishes.
pub fn is_estimate(
    g_values: &[f64],
    log_q: &[f64],
    positions: &[Vec<f64>],
) -> (f64, f64, Vec<f64>) {
    let n = g_values.len() as f64;
    let weights: Vec<f64> = g_values
        .iter()
        .zip(log_q)
        .zip(positions)
        .map(|((g, lq), x)| {
            if *g <= 0.0 {
                (log_std_normal(x) - lq).exp()
            } else {
                0.0
            }
        })
        .collect();
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        return (0.0, f64::INFINITY, weights);
    }
    let sum_sq: f64 = weights.iter().map(|w| w * w).sum();
    let p_hat = sum / n;
    let delta_hat = (sum_sq / (sum * sum) - 1.0 / n).max(0.0).sqrt();
    (p_hat, delta_hat, weights)
}

/// Coefficient of variation of a weight set (population convention) and
/// the relative effective sample size 1 / (1 + delta_w^2).
pub fn weight_cov_stat(weights: &[f64]) -> (f64, f64) {
    let n = weights.len() as f64;
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        return (f64::INFINITY, 0.0);
    }
    let sum_sq: f64 = weights.iter().map(|w| w * w).sum();
    let delta_w = (n * sum_sq / (sum * sum) - 1.0).max(0.0).sqrt();
    (delta_w, 1.0 / (1.0 + delta_w * delta_w))
}

/// Run the full estimator on `problem`.
///
/// Each iteration spends `n_grad` model and gradient calls on the inducing
/// set; after the loop one model sweep over the `n` estimation samples
/// produces the estimate, so model calls total `n_grad * iterations + n`.
pub fn run_svre(problem: &LimitStateProblem, config: &SvreConfig) -> Result<EstimateReport> {
    config.validate()?;
    let mut smoother = config.smoother;
    smoother.finalize()?;
    let kernel_cfg = config.resolved_kernel();

    let model_calls_before = problem.model_calls();
    let gradient_calls_before = problem.gradient_calls();

    let init = init_ensemble(config.n_grad, config.n, problem.dim(), config.init, config.seed)?;
    let mut ensemble = init.ensemble;
    let mut warnings: Vec<String> = init.warning.into_iter().collect();

    let mut steps = Vec::new();
    let mut delta_w_last = None;
    let mut termination = Termination::MaxIterations;
    let mut abort_reason = None;

    for _ in 0..config.t_max {
        match transport_step(&mut ensemble, problem, &smoother, &kernel_cfg, &config.transport) {
            Ok(outcome) => {
                let stop_weights: Vec<f64> = outcome
                    .inducing_g
                    .iter()
                    .zip(&outcome.inducing_log_p0)
                    .zip(&outcome.inducing_log_q)
                    .map(|((g, lp), lq)| if *g <= 0.0 { (lp - lq).exp() } else { 0.0 })
                    .collect();
                let (delta_w, _ress) = weight_cov_stat(&stop_weights);
                delta_w_last = Some(delta_w);
                steps.push(outcome.diagnostics);
                if delta_w <= config.delta_thresh {
                    termination = Termination::Converged;
                    break;
                }
            }
            Err(e) => {
                termination = Termination::Aborted;
                abort_reason = Some(e.to_string());
                break;
            }
        }
    }

    let (p_hat, delta_hat, weights, final_positions) =
        if termination == Termination::Aborted {
            warnings.push(abort_reason.unwrap_or_else(|| "aborted".into()));
            (None, None, Vec::new(), Vec::new())
        } else {
            let g_est: Vec<f64> =
                ensemble.estimation_positions().iter().map(|x| problem.eval(x)).collect();
            let (p, delta, w) =
                is_estimate(&g_est, ensemble.estimation_log_q(), ensemble.estimation_positions());
            if w.iter().all(|v| *v == 0.0) {
                warnings.push("no failure samples".into());
            }
            (Some(p), Some(delta), w, ensemble.estimation_positions().to_vec())
        };

    Ok(EstimateReport {
        p_hat,
        delta_hat,
        iterations: ensemble.step,
        model_calls: problem.model_calls() - model_calls_before,
        gradient_calls: problem.gradient_calls() - gradient_calls_before,
        termination,
        delta_w: delta_w_last,
        seed: config.seed,
        warnings,
        weights,
        final_positions,
        steps,
    })
}
