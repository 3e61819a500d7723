//! 1-D Darcy flow across a porous medium: lognormal diffusivity field via
//! a Karhunen-Loeve expansion, Gaussian-plume source, pressure solve by
//! quadrature, and the max-pressure exceedance limit state with analytic
//! gradients.
//!
//! The boundary value problem on [0, 1] is
//! d/dy (kappa u') = -J(y) with the flux condition kappa(0) u'(0) = F
//! (the boundary flux drains the injected source mass) and u(1) = 1, which
//! integrates to u(y) = 1 + int_y^1 (Q(s) - F) / kappa(s) ds with Q the
//! cumulative source. The composite trapezoid rule on a uniform grid
//! discretizes every integral, so the analytic gradients below are the
//! exact derivatives of the discrete solution.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SvreError};
use crate::lsf::LimitStateProblem;
use crate::stats::norm_cdf;

/// Problem constants; the defaults match the benchmark configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DarcyConfig {
    /// Total stochastic dimension: one flux variable plus d - 1 field terms.
    pub d: usize,
    #[serde(default = "default_grid_m")]
    pub grid_m: usize,
    #[serde(default = "default_p_thresh")]
    pub p_thresh: f64,
    #[serde(default = "default_mu_lnk")]
    pub mu_lnk: f64,
    #[serde(default = "default_var_lnk")]
    pub var_lnk: f64,
    #[serde(default = "default_corr_len")]
    pub corr_len: f64,
    #[serde(default = "default_mu_flux")]
    pub mu_flux: f64,
    #[serde(default = "default_var_flux")]
    pub var_flux: f64,
}

fn default_grid_m() -> usize {
    513
}
fn default_p_thresh() -> f64 {
    2.7
}
fn default_mu_lnk() -> f64 {
    1.0
}
fn default_var_lnk() -> f64 {
    0.3
}
fn default_corr_len() -> f64 {
    0.1
}
fn default_mu_flux() -> f64 {
    2.0
}
fn default_var_flux() -> f64 {
    0.5
}

impl DarcyConfig {
    pub fn with_dim(d: usize) -> Self {
        DarcyConfig {
            d,
            grid_m: default_grid_m(),
            p_thresh: default_p_thresh(),
            mu_lnk: default_mu_lnk(),
            var_lnk: default_var_lnk(),
            corr_len: default_corr_len(),
            mu_flux: default_mu_flux(),
            var_flux: default_var_flux(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(SvreError::Problem(format!("darcy.d must be >= 2, got {}", self.d)));
        }
        if self.grid_m < 65 {
            return Err(SvreError::Problem(format!(
                "darcy.grid_m must be >= 65, got {}",
                self.grid_m
            )));
        }
        if !(self.corr_len > 0.0) {
            return Err(SvreError::Problem(format!(
                "darcy.corr_len must be > 0, got {}",
                self.corr_len
            )));
        }
        Ok(())
    }
}

/// Leading eigenpairs of the exponential correlation kernel on [0, 1],
/// discretized with the Nystrom method on a uniform trapezoid grid.
#[derive(Debug, Clone)]
pub struct KLBasis {
    /// Eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Eigenfunctions on the grid, unit L2[0,1] norm, phi_i(0) >= 0.
    pub eigenfunctions: Vec<Vec<f64>>,
    /// Grid nodes.
    pub grid: Vec<f64>,
    /// Trapezoid quadrature weights.
    pub weights: Vec<f64>,
}

fn uniform_grid(m: usize) -> (Vec<f64>, Vec<f64>) {
    let h = 1.0 / (m - 1) as f64;
    let grid: Vec<f64> = (0..m).map(|j| j as f64 * h).collect();
    let mut weights = vec![h; m];
    weights[0] *= 0.5;
    weights[m - 1] *= 0.5;
    (grid, weights)
}

/// Nystrom discretization of the kernel exp(-|y - y'| / corr_len): build
/// the weighted kernel matrix, take the symmetric eigendecomposition and
/// keep the `terms` leading pairs.
pub fn kl_decompose(corr_len: f64, grid_m: usize, terms: usize) -> Result<KLBasis> {
    if terms > grid_m {
        return Err(SvreError::Problem(format!(
            "KL terms ({terms}) exceed grid size ({grid_m})"
        )));
    }
    let (grid, weights) = uniform_grid(grid_m);
    let sqrt_w: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let b = DMatrix::from_fn(grid_m, grid_m, |i, j| {
        (-(grid[i] - grid[j]).abs() / corr_len).exp() * sqrt_w[i] * sqrt_w[j]
    });
    let eig = SymmetricEigen::new(b);

    let mut order: Vec<usize> = (0..grid_m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());

    let mut eigenvalues = Vec::with_capacity(terms);
    let mut eigenfunctions = Vec::with_capacity(terms);
    for &idx in order.iter().take(terms) {
        let lambda = eig.eigenvalues[idx];
        if !(lambda > 0.0) {
            return Err(SvreError::Numerical(format!(
                "KL eigenvalue {lambda} is not positive among the leading {terms} terms"
            )));
        }
        let mut phi: Vec<f64> =
            (0..grid_m).map(|j| eig.eigenvectors[(j, idx)] / sqrt_w[j]).collect();
        // fix the sign so the decomposition is reproducible
        let lead = phi.iter().find(|v| v.abs() > 1e-10).copied().unwrap_or(0.0);
        if lead < 0.0 {
            phi.iter_mut().for_each(|v| *v = -*v);
        }
        eigenvalues.push(lambda);
        eigenfunctions.push(phi);
    }
    Ok(KLBasis { eigenvalues, eigenfunctions, grid, weights })
}

/// Field realization kappa(y_j) = exp(mu + sigma sum_i sqrt(lambda_i)
/// phi_i(y_j) xi_i) on the basis grid.
pub fn sample_field(basis: &KLBasis, mu_lnk: f64, var_lnk: f64, xi: &[f64]) -> Vec<f64> {
    assert_eq!(xi.len(), basis.eigenvalues.len());
    let sigma = var_lnk.sqrt();
    let m = basis.grid.len();
    let mut log_k = vec![mu_lnk; m];
    for (i, phi) in basis.eigenfunctions.iter().enumerate() {
        let coef = sigma * basis.eigenvalues[i].sqrt() * xi[i];
        for (lk, p) in log_k.iter_mut().zip(phi) {
            *lk += coef * p;
        }
    }
    log_k.iter().map(|v| v.exp()).collect()
}

const PLUME_CENTERS: [f64; 4] = [0.2, 0.4, 0.6, 0.8];
const PLUME_STD: f64 = 0.05;
const PLUME_WEIGHT: f64 = 0.8;

/// Source term: mixture of four Gaussian plumes,
/// J(y) = 0.8 sum_i N(y | 0.2 i, 0.05).
pub fn source_term(y: f64) -> f64 {
    let norm = 1.0 / (PLUME_STD * (2.0 * std::f64::consts::PI).sqrt());
    PLUME_CENTERS
        .iter()
        .map(|mu| {
            let z = (y - mu) / PLUME_STD;
            PLUME_WEIGHT * norm * (-0.5 * z * z).exp()
        })
        .sum()
}

/// Cumulative source Q(s) = int_0^s J(t) dt, in closed form.
pub fn source_cumulative(s: f64) -> f64 {
    PLUME_CENTERS
        .iter()
        .map(|mu| {
            PLUME_WEIGHT * (norm_cdf((s - mu) / PLUME_STD) - norm_cdf(-mu / PLUME_STD))
        })
        .sum()
}

/// Pressure profile u(y_j) = 1 + int_{y_j}^1 (Q(s) - F) / kappa(s) ds by
/// composite trapezoid on the uniform grid implied by `kappa.len()`.
pub fn solve_pressure(kappa: &[f64], flux: f64) -> Vec<f64> {
    let m = kappa.len();
    let (grid, _) = uniform_grid(m);
    let q: Vec<f64> = grid.iter().map(|y| source_cumulative(*y)).collect();
    solve_pressure_with_cumulative(kappa, flux, &q)
}

/// As `solve_pressure` but with a caller-supplied cumulative source on the
/// same grid.
pub fn solve_pressure_with_cumulative(kappa: &[f64], flux: f64, q: &[f64]) -> Vec<f64> {
    let m = kappa.len();
    let h = 1.0 / (m - 1) as f64;
    let f: Vec<f64> = kappa.iter().zip(q).map(|(k, qi)| (qi - flux) / k).collect();
    let mut u = vec![1.0; m];
    // suffix trapezoid
    let mut acc = 0.0;
    for j in (0..m - 1).rev() {
        acc += 0.5 * h * (f[j] + f[j + 1]);
        u[j] = 1.0 + acc;
    }
    u
}

struct DarcyModel {
    config: DarcyConfig,
    basis: KLBasis,
    /// sqrt(lambda_i) phi_i(y_j), scaled by sigma_lnk.
    scaled_basis: Vec<Vec<f64>>,
    q_grid: Vec<f64>,
}

impl DarcyModel {
    fn new(config: DarcyConfig) -> Result<Self> {
        config.validate()?;
        let terms = config.d - 1;
        let basis = kl_decompose(config.corr_len, config.grid_m, terms)?;
        let sigma = config.var_lnk.sqrt();
        let scaled_basis: Vec<Vec<f64>> = basis
            .eigenfunctions
            .iter()
            .zip(&basis.eigenvalues)
            .map(|(phi, l)| phi.iter().map(|p| sigma * l.sqrt() * p).collect())
            .collect();
        let q_grid: Vec<f64> = basis.grid.iter().map(|y| source_cumulative(*y)).collect();
        Ok(DarcyModel { config, basis, scaled_basis, q_grid })
    }

    fn kappa(&self, xi: &[f64]) -> Vec<f64> {
        let m = self.basis.grid.len();
        let mut log_k = vec![self.config.mu_lnk; m];
        for (row, x) in self.scaled_basis.iter().zip(xi) {
            for (lk, r) in log_k.iter_mut().zip(row) {
                *lk += r * x;
            }
        }
        log_k.iter().map(|v| v.exp()).collect()
    }

    fn pressure(&self, x: &[f64]) -> (Vec<f64>, f64, Vec<f64>) {
        let flux = self.config.mu_flux + self.config.var_flux.sqrt() * x[0];
        let kappa = self.kappa(&x[1..]);
        let u = solve_pressure_with_cumulative(&kappa, flux, &self.q_grid);
        (u, flux, kappa)
    }

    fn eval(&self, x: &[f64]) -> f64 {
        let (u, _, _) = self.pressure(x);
        let max_u = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        self.config.p_thresh - max_u
    }

    fn grad(&self, x: &[f64]) -> Vec<f64> {
        let (u, flux, kappa) = self.pressure(x);
        // argmax node, lowest index on ties
        let mut j_star = 0;
        for j in 1..u.len() {
            if u[j] > u[j_star] {
                j_star = j;
            }
        }
        let m = kappa.len();
        let h = 1.0 / (m - 1) as f64;
        // trapezoid weights restricted to [y*, 1]
        let mut w = vec![0.0; m];
        for j in j_star..m {
            w[j] = if j == j_star || j == m - 1 { 0.5 * h } else { h };
        }
        if j_star == m - 1 {
            w[m - 1] = 0.0;
        }

        let mut grad = vec![0.0; self.config.d];
        // flux coordinate: du*/dF = -int_{y*}^1 1/kappa
        let int_inv_kappa: f64 = (j_star..m).map(|j| w[j] / kappa[j]).sum();
        grad[0] = self.config.var_flux.sqrt() * int_inv_kappa;
        // field coordinates: dg/dxi_i = + int_{y*}^1 (Q-F)/kappa * s_i
        // with s_i the sigma sqrt(lambda_i) phi_i row
        let f_tail: Vec<f64> =
            (j_star..m).map(|j| w[j] * (self.q_grid[j] - flux) / kappa[j]).collect();
        for (i, row) in self.scaled_basis.iter().enumerate() {
            let mut acc = 0.0;
            for (offset, fv) in f_tail.iter().enumerate() {
                acc += fv * row[j_star + offset];
            }
            grad[1 + i] = acc;
        }
        grad
    }
}

/// Build the max-pressure exceedance limit state
/// g(x) = p_thresh - max_j u(y_j), with x_1 the flux variable and the
/// remaining coordinates the field variables.
pub fn darcy_lsf(config: DarcyConfig) -> Result<LimitStateProblem> {
    let model = Arc::new(DarcyModel::new(config)?);
    let eval_model = Arc::clone(&model);
    let grad_model = Arc::clone(&model);
    Ok(LimitStateProblem::new(
        "darcy",
        config.d,
        Arc::new(move |x: &[f64]| eval_model.eval(x)),
        Arc::new(move |x: &[f64]| grad_model.grad(x)),
        None,
    ))
}
