//! Logistic-CDF smoothing of the failure indicator.
//!
//! The hard indicator I[g <= 0] is replaced by
//! F(g) = 1/2 (1 + tanh(-pi/sqrt(3) (mu + g) / (2 sigma))), a logistic
//! survival curve in g. The location mu is chosen so that a logistic
//! variable with mean mu and standard deviation sigma has mass `p_mass`
//! below zero; F(0) then equals `p_mass`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SvreError};

/// Saturation guard: beyond this tanh argument the exact limits are used.
const TANH_SATURATION: f64 = 40.0;

const SQRT_3: f64 = 1.7320508075688772;

/// Parameters of the logistic indicator smoother.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmootherParams {
    /// Probability mass placed in the failure domain.
    #[serde(rename = "P", default = "default_p_mass")]
    pub p_mass: f64,
    /// Standard deviation of the logistic variable (smoothing width).
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Derived location; kept consistent with (p_mass, sigma).
    #[serde(skip)]
    mu: f64,
}

fn default_p_mass() -> f64 {
    0.9
}

fn default_sigma() -> f64 {
    0.001
}

impl Default for SmootherParams {
    fn default() -> Self {
        SmootherParams::new(default_p_mass(), default_sigma()).unwrap()
    }
}

impl SmootherParams {
    pub fn new(p_mass: f64, sigma: f64) -> Result<Self> {
        let mu = mu_from_mass(p_mass, sigma)?;
        Ok(SmootherParams { p_mass, sigma, mu })
    }

    /// Re-derive mu after deserialization.
    pub fn finalize(&mut self) -> Result<()> {
        self.mu = mu_from_mass(self.p_mass, self.sigma)?;
        Ok(())
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    fn tanh_arg(&self, g_value: f64) -> f64 {
        -std::f64::consts::PI / SQRT_3 * (self.mu + g_value) / (2.0 * self.sigma)
    }
}

/// Location of the smoother: mu = -sqrt(3) sigma / pi * ln(P / (1 - P)).
pub fn mu_from_mass(p_mass: f64, sigma: f64) -> Result<f64> {
    if !(p_mass > 0.0 && p_mass < 1.0) {
        return Err(SvreError::Config(format!(
            "smoother.P must lie in (0, 1), got {p_mass}"
        )));
    }
    if !(sigma > 0.0) {
        return Err(SvreError::Config(format!(
            "smoother.sigma must be > 0, got {sigma}"
        )));
    }
    Ok(-SQRT_3 * sigma / std::f64::consts::PI * (p_mass / (1.0 - p_mass)).ln())
}

/// Smoothed indicator value in [0, 1], strictly decreasing in `g_value`
/// away from saturation.
pub fn smooth_indicator(g_value: f64, params: &SmootherParams) -> f64 {
    let u = params.tanh_arg(g_value);
    if u > TANH_SATURATION {
        1.0
    } else if u < -TANH_SATURATION {
        0.0
    } else {
        0.5 * (1.0 + u.tanh())
    }
}

/// Derivative of log F with respect to g (scalar chain-rule factor).
pub fn log_indicator_slope(g_value: f64, params: &SmootherParams) -> f64 {
    let u = params.tanh_arg(g_value);
    let factor = if u > TANH_SATURATION {
        0.0
    } else if u < -TANH_SATURATION {
        2.0
    } else {
        1.0 - u.tanh()
    };
    -std::f64::consts::PI / (2.0 * SQRT_3 * params.sigma) * factor
}

/// Gradient of log F at a point with LSF value `g_value` and LSF gradient
/// `g_grad`: -(pi grad g) / (2 sqrt(3) sigma) * (1 - tanh(arg)).
pub fn log_smooth_indicator_grad(
    g_value: f64,
    g_grad: &[f64],
    params: &SmootherParams,
) -> Vec<f64> {
    let slope = log_indicator_slope(g_value, params);
    g_grad.iter().map(|gi| slope * gi).collect()
}
