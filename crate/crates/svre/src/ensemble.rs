//! Particle ensemble: positions, role split, tracked log-densities and
//! per-particle optimizer state.
//!
//! The first `n_grad` rows are inducing samples (they define the transport
//! map and consume gradient evaluations); the remaining `n` rows are
//! estimation samples that stay statistically independent and feed the
//! importance sampling estimate. The split is fixed for the lifetime of a
//! run.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sobol::params::JoeKuoD6;
use sobol::Sobol;

use crate::error::{Result, SvreError};
use crate::stats::{log_std_normal, norm_inv_cdf};

/// Largest dimension covered by the bundled Sobol direction numbers.
pub const SOBOL_MAX_DIM: usize = 1000;

/// Initial sampling plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Randomized (shifted) Sobol sequence mapped through the inverse
    /// standard-normal CDF.
    Sobol,
    /// Latin hypercube sample, the independence-preserving alternative.
    Lhs,
}

/// Particle system state for one run.
#[derive(Debug, Clone)]
pub struct Ensemble {
    /// Particle positions, inducing rows first.
    pub positions: Vec<Vec<f64>>,
    /// Accumulated log-density per particle, starting at log p0(x^0).
    pub log_q: Vec<f64>,
    /// Running squared-gradient average for RMSProp, per particle and
    /// dimension. Zero until the first transport step populates it.
    pub rmsprop_v2: Vec<Vec<f64>>,
    /// Completed transport steps.
    pub step: usize,
    n_grad: usize,
}

impl Ensemble {
    pub fn n_grad(&self) -> usize {
        self.n_grad
    }

    pub fn n_estimation(&self) -> usize {
        self.positions.len() - self.n_grad
    }

    pub fn dim(&self) -> usize {
        self.positions[0].len()
    }

    pub fn inducing_positions(&self) -> &[Vec<f64>] {
        &self.positions[..self.n_grad]
    }

    pub fn estimation_positions(&self) -> &[Vec<f64>] {
        &self.positions[self.n_grad..]
    }

    pub fn estimation_log_q(&self) -> &[f64] {
        &self.log_q[self.n_grad..]
    }
}

/// Raw Sobol points in (0, 1)^d, skipping the all-zero head of the
/// sequence, with an optional per-dimension rotation shift (mod 1).
pub fn sobol_points(count: usize, dim: usize, shift: Option<&[f64]>) -> Result<Vec<Vec<f64>>> {
    if dim > SOBOL_MAX_DIM {
        return Err(SvreError::Config(format!(
            "Sobol direction numbers cover {SOBOL_MAX_DIM} dimensions, requested {dim}"
        )));
    }
    let params = JoeKuoD6::standard();
    let seq = Sobol::<f64>::new(dim, &params);
    let points = seq
        .skip(1)
        .take(count)
        .map(|mut p| {
            if let Some(s) = shift {
                for (v, sj) in p.iter_mut().zip(s) {
                    *v = (*v + sj).fract();
                }
            }
            p
        })
        .collect::<Vec<_>>();
    Ok(points)
}

/// Latin hypercube sample of `count` points in (0, 1)^d.
pub fn lhs_points(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; dim]; count];
    let mut strata: Vec<usize> = (0..count).collect();
    for j in 0..dim {
        strata.shuffle(rng);
        for (i, row) in out.iter_mut().enumerate() {
            row[j] = (strata[i] as f64 + rng.gen::<f64>()) / count as f64;
        }
    }
    out
}

fn to_standard_normal(mut points: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    for p in points.iter_mut() {
        for v in p.iter_mut() {
            // keep the inverse CDF finite at the box edges
            *v = norm_inv_cdf(v.clamp(1e-15, 1.0 - 1e-15));
        }
    }
    points
}

/// Outcome of ensemble initialization; `warning` is set when the requested
/// scheme had to be replaced.
pub struct InitOutcome {
    pub ensemble: Ensemble,
    pub warning: Option<String>,
}

/// Draw `n_grad + n` initial particles from the standard normal and record
/// their exact log-densities.
///
/// Sobol initialization applies a seed-derived Cranley-Patterson rotation
/// so that repeated runs are randomized while each seed stays fully
/// deterministic. Dimensions beyond the Sobol table fall back to Latin
/// hypercube sampling with a warning.
pub fn init_ensemble(
    n_grad: usize,
    n: usize,
    dim: usize,
    scheme: InitScheme,
    seed: u64,
) -> Result<InitOutcome> {
    if dim < 1 {
        return Err(SvreError::Config("dimension must be >= 1".into()));
    }
    let count = n_grad + n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut warning = None;

    let uniforms = match scheme {
        InitScheme::Sobol => {
            let shift: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>()).collect();
            match sobol_points(count, dim, Some(&shift)) {
                Ok(p) => p,
                Err(SvreError::Config(msg)) => {
                    warning = Some(format!("{msg}; falling back to Latin hypercube sampling"));
                    lhs_points(count, dim, &mut rng)
                }
                Err(e) => return Err(e),
            }
        }
        InitScheme::Lhs => lhs_points(count, dim, &mut rng),
    };

    let positions = to_standard_normal(uniforms);
    let log_q = positions.iter().map(|p| log_std_normal(p)).collect();
    let ensemble = Ensemble {
        positions,
        log_q,
        rmsprop_v2: vec![vec![0.0; dim]; count],
        step: 0,
        n_grad,
    };
    Ok(InitOutcome { ensemble, warning })
}
