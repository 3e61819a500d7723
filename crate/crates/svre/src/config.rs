//! Run configuration: problem selection by id plus parameters, estimator
//! settings, and benchmark repetition.

use serde::{Deserialize, Serialize};

use crate::darcy::{darcy_lsf, DarcyConfig};
use crate::error::{Result, SvreError};
use crate::estimator::SvreConfig;
use crate::lsf::{fourbranch_lsf, linear_lsf, quadratic_lsf, LimitStateProblem};
use crate::oracle::quadratic_reference;

/// Problem addressed by string id and a parameter map.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    Linear {
        d: usize,
        beta: f64,
    },
    Quadratic {
        d: usize,
        beta: f64,
        kappa: f64,
    },
    Fourbranch {
        gamma: f64,
    },
    Darcy(DarcyConfig),
}

impl ProblemSpec {
    pub fn build(&self) -> Result<LimitStateProblem> {
        match self {
            ProblemSpec::Linear { d, beta } => linear_lsf(*d, *beta),
            ProblemSpec::Quadratic { d, beta, kappa } => quadratic_lsf(*d, *beta, *kappa),
            ProblemSpec::Fourbranch { gamma } => fourbranch_lsf(2, *gamma),
            ProblemSpec::Darcy(cfg) => darcy_lsf(*cfg),
        }
    }

    /// Analytic or semi-analytic reference probability, when one exists.
    pub fn analytic_reference(&self) -> Result<Option<f64>> {
        match self {
            ProblemSpec::Linear { beta, .. } => {
                Ok(Some(crate::stats::norm_cdf(-beta)))
            }
            ProblemSpec::Quadratic { beta, kappa, .. } => {
                Ok(Some(quadratic_reference(*beta, *kappa)?))
            }
            _ => Ok(None),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            ProblemSpec::Linear { .. } => "linear",
            ProblemSpec::Quadratic { .. } => "quadratic",
            ProblemSpec::Fourbranch { .. } => "fourbranch",
            ProblemSpec::Darcy(_) => "darcy",
        }
    }
}

/// Top-level configuration file contents.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    pub svre: SvreConfig,
    /// Benchmark repetitions; single runs ignore it.
    #[serde(default = "default_runs")]
    pub runs: usize,
}

fn default_runs() -> usize {
    100
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| SvreError::Config(format!("malformed config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.svre.validate()?;
        let problem = self.problem.build()?;
        drop(problem);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_linear_config() {
        let text = r#"{
            "problem": {"id": "linear", "d": 100, "beta": 4.0},
            "svre": {
                "n": 1000,
                "transport": {"normalization": "l2"}
            }
        }"#;
        let cfg = RunConfig::from_json(text).unwrap();
        assert_eq!(cfg.problem.id(), "linear");
        assert_eq!(cfg.svre.n_grad, 20);
        assert_eq!(cfg.svre.delta_thresh, 5.0);
        assert_eq!(cfg.svre.transport.resolved_base_rate(), 1.0);
        assert_eq!(cfg.runs, 100);
    }

    #[test]
    fn rejects_unknown_keys_with_position() {
        let text = r#"{
            "problem": {"id": "linear", "d": 10, "beta": 2.0},
            "svre": {"n": 100, "transport": {"normalization": "l2"}},
            "typo_key": 1
        }"#;
        let err = RunConfig::from_json(text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("typo_key") && msg.contains("line"), "{msg}");
    }

    #[test]
    fn rejects_invalid_sample_counts() {
        let text = r#"{
            "problem": {"id": "linear", "d": 10, "beta": 2.0},
            "svre": {"n": 100, "n_grad": 0, "transport": {"normalization": "l2"}}
        }"#;
        let err = RunConfig::from_json(text).unwrap_err();
        assert!(err.to_string().contains("n_grad"));
    }

    #[test]
    fn darcy_spec_round_trip() {
        let text = r#"{
            "problem": {"id": "darcy", "d": 10, "grid_m": 129},
            "svre": {"n": 200, "transport": {"normalization": "l2"}}
        }"#;
        let cfg = RunConfig::from_json(text).unwrap();
        let p = cfg.problem.build().unwrap();
        assert_eq!(p.dim(), 10);
    }

    #[test]
    fn references_by_problem() {
        let lin = ProblemSpec::Linear { d: 100, beta: 4.0 };
        let r = lin.analytic_reference().unwrap().unwrap();
        assert!((r - 3.167124183e-5).abs() / r < 1e-8);
        let quad = ProblemSpec::Quadratic { d: 2, beta: 4.0, kappa: 10.0 };
        let r = quad.analytic_reference().unwrap().unwrap();
        assert!((r - 4.73185826943e-6).abs() / r < 1e-6);
        let fb = ProblemSpec::Fourbranch { gamma: 0.0 };
        assert!(fb.analytic_reference().unwrap().is_none());
    }
}
