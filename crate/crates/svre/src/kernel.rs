//! Isotropic Gaussian RBF kernel with derivatives and bandwidth selection.
//!
//! The kernel is k(x, y) = exp(-||x - y||^2 / (2 l^2)). Both first
//! derivatives, the mixed second derivative and the median-distance
//! bandwidth heuristic are provided; the transport map needs all of them.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SvreError};
use crate::stats::sq_dist;

/// Bandwidth selection strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BandwidthStrategy {
    /// Recompute l from the median pairwise distance every iteration.
    Median,
    /// Keep a fixed, configured l.
    Fixed,
}

/// Kernel configuration: strategy plus the length used in fixed mode.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub strategy: BandwidthStrategy,
    #[serde(default = "default_fixed_length")]
    pub length: f64,
}

fn default_fixed_length() -> f64 {
    10.0
}

impl KernelConfig {
    pub fn median() -> Self {
        KernelConfig { strategy: BandwidthStrategy::Median, length: default_fixed_length() }
    }

    pub fn fixed(length: f64) -> Self {
        KernelConfig { strategy: BandwidthStrategy::Fixed, length }
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategy == BandwidthStrategy::Fixed && !(self.length > 0.0) {
            return Err(SvreError::Config(format!(
                "kernel.length must be > 0 in fixed mode, got {}",
                self.length
            )));
        }
        Ok(())
    }

    /// Resolve the bandwidth for the given sample set.
    pub fn bandwidth(&self, samples: &[Vec<f64>]) -> Result<f64> {
        match self.strategy {
            BandwidthStrategy::Fixed => Ok(self.length),
            BandwidthStrategy::Median => median_bandwidth(samples),
        }
    }
}

/// Kernel value k(x, y) = exp(-||x - y||^2 / (2 l^2)).
pub fn rbf(x: &[f64], y: &[f64], ell: f64) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    (-sq_dist(x, y) / (2.0 * ell * ell)).exp()
}

/// Gradient with respect to the first argument: -(x - y) k / l^2.
pub fn rbf_grad_x(x: &[f64], y: &[f64], ell: f64) -> Vec<f64> {
    let k = rbf(x, y, ell);
    let inv_l2 = 1.0 / (ell * ell);
    x.iter().zip(y).map(|(xi, yi)| -(xi - yi) * k * inv_l2).collect()
}

/// Gradient with respect to the second argument: +(x - y) k / l^2.
pub fn rbf_grad_y(x: &[f64], y: &[f64], ell: f64) -> Vec<f64> {
    let k = rbf(x, y, ell);
    let inv_l2 = 1.0 / (ell * ell);
    x.iter().zip(y).map(|(xi, yi)| (xi - yi) * k * inv_l2).collect()
}

/// Mixed second derivative d^2 k / dx_a dy_b as a dense matrix:
/// (I / l^2 - (x - y)(x - y)^T / l^4) k.
pub fn rbf_hess_xy(x: &[f64], y: &[f64], ell: f64) -> DMatrix<f64> {
    let d = x.len();
    let k = rbf(x, y, ell);
    let inv_l2 = 1.0 / (ell * ell);
    let mut out = DMatrix::zeros(d, d);
    for a in 0..d {
        let da = x[a] - y[a];
        for b in 0..d {
            let db = x[b] - y[b];
            let mut v = -da * db * inv_l2 * inv_l2 * k;
            if a == b {
                v += inv_l2 * k;
            }
            out[(a, b)] = v;
        }
    }
    out
}

/// Median-distance bandwidth: l = sqrt(median^2 / (2 ln n)) over all
/// n(n-1)/2 pairwise Euclidean distances.
///
/// Fails when every pairwise distance is zero.
pub fn median_bandwidth(samples: &[Vec<f64>]) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(SvreError::Config(format!(
            "median bandwidth needs at least two samples, got {n}"
        )));
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push(sq_dist(&samples[i], &samples[j]).sqrt());
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = dists.len();
    let median = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    if !(median > 0.0) {
        return Err(SvreError::DegenerateEnsemble);
    }
    Ok((median * median / (2.0 * (n as f64).ln())).sqrt())
}
