//! Limit-state functions in standard-normal space.
//!
//! A limit state g maps an input point to a scalar; the failure event is
//! {g <= 0}. All problems here are defined directly in standard-normal
//! space and carry exact gradients plus call counters for cost accounting.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Result, SvreError};
use crate::stats::norm_cdf;

type EvalFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type GradFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

/// A limit-state function with exact gradient and call counters.
///
/// Evaluation is pure and reentrant; the counters are atomic so concurrent
/// evaluations stay accurate. `clone` shares the underlying function but
/// starts fresh counters, which keeps per-run accounting exact when one
/// problem definition is reused across benchmark runs.
pub struct LimitStateProblem {
    name: String,
    dim: usize,
    eval_fn: Arc<EvalFn>,
    grad_fn: Arc<GradFn>,
    reference_pf: Option<f64>,
    model_calls: AtomicU64,
    gradient_calls: AtomicU64,
}

impl Clone for LimitStateProblem {
    fn clone(&self) -> Self {
        LimitStateProblem {
            name: self.name.clone(),
            dim: self.dim,
            eval_fn: Arc::clone(&self.eval_fn),
            grad_fn: Arc::clone(&self.grad_fn),
            reference_pf: self.reference_pf,
            model_calls: AtomicU64::new(0),
            gradient_calls: AtomicU64::new(0),
        }
    }
}

impl std::fmt::Debug for LimitStateProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LimitStateProblem")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("model_calls", &self.model_calls())
            .field("gradient_calls", &self.gradient_calls())
            .finish()
    }
}

impl LimitStateProblem {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        eval_fn: Arc<EvalFn>,
        grad_fn: Arc<GradFn>,
        reference_pf: Option<f64>,
    ) -> Self {
        LimitStateProblem {
            name: name.into(),
            dim,
            eval_fn,
            grad_fn,
            reference_pf,
            model_calls: AtomicU64::new(0),
            gradient_calls: AtomicU64::new(0),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Exact or semi-analytic failure probability, when one is known.
    pub fn reference_pf(&self) -> Option<f64> {
        self.reference_pf
    }

    /// Evaluate g(x). Increments the model-call counter by one.
    pub fn eval(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        self.model_calls.fetch_add(1, Ordering::Relaxed);
        (self.eval_fn)(x)
    }

    /// Evaluate grad g(x). Increments the gradient-call counter by one.
    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.dim);
        self.gradient_calls.fetch_add(1, Ordering::Relaxed);
        (self.grad_fn)(x)
    }

    pub fn model_calls(&self) -> u64 {
        self.model_calls.load(Ordering::Relaxed)
    }

    pub fn gradient_calls(&self) -> u64 {
        self.gradient_calls.load(Ordering::Relaxed)
    }
}

/// One recorded evaluation, used by the gradient-check report.
#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub x: Vec<f64>,
    pub g_value: f64,
    pub gradient: Option<Vec<f64>>,
}

/// g(x) = beta - (1/sqrt(d)) sum x_i with constant gradient.
///
/// The exact failure probability Phi(-beta) is attached as reference.
pub fn linear_lsf(dim: usize, beta: f64) -> Result<LimitStateProblem> {
    if dim < 1 {
        return Err(SvreError::Problem("linear LSF needs dim >= 1".into()));
    }
    if !beta.is_finite() {
        return Err(SvreError::Problem(format!("linear LSF: beta must be finite, got {beta}")));
    }
    let scale = 1.0 / (dim as f64).sqrt();
    let eval = move |x: &[f64]| beta - scale * x.iter().sum::<f64>();
    let grad = move |x: &[f64]| vec![-scale; x.len()];
    Ok(LimitStateProblem::new(
        "linear",
        dim,
        Arc::new(eval),
        Arc::new(grad),
        Some(norm_cdf(-beta)),
    ))
}

/// g(x) = beta + (kappa/4)(x_1 - x_2)^2 - (1/sqrt(d)) sum x_i.
///
/// The reference probability is dimension independent; it is attached by
/// the oracle module where the reducing quadrature lives.
pub fn quadratic_lsf(dim: usize, beta: f64, kappa: f64) -> Result<LimitStateProblem> {
    if dim < 2 {
        return Err(SvreError::Problem(format!("quadratic LSF needs dim >= 2, got {dim}")));
    }
    let scale = 1.0 / (dim as f64).sqrt();
    let eval = move |x: &[f64]| {
        let diff = x[0] - x[1];
        beta + kappa / 4.0 * diff * diff - scale * x.iter().sum::<f64>()
    };
    let grad = move |x: &[f64]| {
        let diff = x[0] - x[1];
        let mut g = vec![-scale; x.len()];
        g[0] += kappa / 2.0 * diff;
        g[1] -= kappa / 2.0 * diff;
        g
    };
    Ok(LimitStateProblem::new("quadratic", dim, Arc::new(eval), Arc::new(grad), None))
}

fn fourbranch_branches(x: &[f64]) -> [f64; 4] {
    let (x1, x2) = (x[0], x[1]);
    let diff = x1 - x2;
    let sum = (x1 + x2) / std::f64::consts::SQRT_2;
    let c = 7.0 / std::f64::consts::SQRT_2;
    [
        0.1 * diff * diff - sum + 3.0,
        0.1 * diff * diff + sum + 3.0,
        diff + c,
        -diff + c,
    ]
}

/// Index of the smallest branch, ties broken by lowest index.
fn fourbranch_argmin(branches: &[f64; 4]) -> usize {
    let mut best = 0;
    for i in 1..4 {
        if branches[i] < branches[best] {
            best = i;
        }
    }
    best
}

/// Gap between the smallest and second-smallest branch of the four-branch
/// problem at `x`; gradient checks skip points where this is tiny.
pub fn fourbranch_branch_gap(x: &[f64]) -> f64 {
    let mut b = fourbranch_branches(x);
    b.sort_by(|a, c| a.partial_cmp(c).unwrap());
    b[1] - b[0]
}

/// Four-branch series system: g(x) = min(g_1, ..., g_4) - gamma in d = 2.
///
/// Failure is {min <= gamma}; the gradient is that of the minimizing
/// branch, ties resolved toward the lowest branch index.
pub fn fourbranch_lsf(dim: usize, gamma: f64) -> Result<LimitStateProblem> {
    if dim != 2 {
        return Err(SvreError::Problem(format!("four-branch LSF needs dim = 2, got {dim}")));
    }
    let eval = move |x: &[f64]| {
        let b = fourbranch_branches(x);
        b[fourbranch_argmin(&b)] - gamma
    };
    let grad = move |x: &[f64]| {
        let b = fourbranch_branches(x);
        let diff = x[0] - x[1];
        let s = 1.0 / std::f64::consts::SQRT_2;
        match fourbranch_argmin(&b) {
            0 => vec![0.2 * diff - s, -0.2 * diff - s],
            1 => vec![0.2 * diff + s, -0.2 * diff + s],
            2 => vec![1.0, -1.0],
            _ => vec![-1.0, 1.0],
        }
    };
    Ok(LimitStateProblem::new("fourbranch", 2, Arc::new(eval), Arc::new(grad), None))
}

/// Maximum relative component error between the analytic gradient and a
/// central finite difference with step `h`.
pub fn gradient_check(problem: &LimitStateProblem, x: &[f64], h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(SvreError::Config(format!("gradient check step must be > 0, got {h}")));
    }
    let analytic = problem.grad(x);
    let mut worst = 0.0f64;
    let mut xp = x.to_vec();
    for j in 0..x.len() {
        xp[j] = x[j] + h;
        let gp = problem.eval(&xp);
        xp[j] = x[j] - h;
        let gm = problem.eval(&xp);
        xp[j] = x[j];
        if !gp.is_finite() || !gm.is_finite() {
            return Err(SvreError::NonFinite {
                iteration: 0,
                detail: format!("gradient check: g non-finite near component {j}"),
            });
        }
        let fd = (gp - gm) / (2.0 * h);
        let err = (fd - analytic[j]).abs() / analytic[j].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn sample_point(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect()
    }

    #[test]
    fn linear_examples() {
        let p = linear_lsf(100, 4.0).unwrap();
        let origin = vec![0.0; 100];
        assert_eq!(p.eval(&origin), 4.0);
        let g = p.grad(&origin);
        assert!(g.iter().all(|v| (*v + 0.1).abs() < 1e-15));
        // reference probability
        assert!((p.reference_pf().unwrap() - 3.17e-5).abs() / 3.17e-5 < 1e-2);

        let p4 = linear_lsf(4, 3.5).unwrap();
        assert!((p4.eval(&[1.0, 1.0, 1.0, 1.0]) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn linear_shift_identity() {
        let d = 7;
        let p = linear_lsf(d, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = sample_point(&mut rng, d);
            let c: f64 = rng.gen_range(-2.0..2.0);
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let lhs = p.eval(&shifted);
            let rhs = p.eval(&x) - c * (d as f64).sqrt();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_examples() {
        assert!(quadratic_lsf(1, 4.0, 10.0).is_err());
        let p = quadratic_lsf(3, 2.5, 7.0).unwrap();
        assert!((p.eval(&[0.0, 0.0, 0.0]) - 2.5).abs() < 1e-15);

        let p2 = quadratic_lsf(2, 4.0, 10.0).unwrap();
        assert!((p2.eval(&[1.0, -1.0]) - 14.0).abs() < 1e-14);
        let g = p2.grad(&[1.0, -1.0]);
        let s = 1.0 / 2f64.sqrt();
        assert!((g[0] - (10.0 - s)).abs() < 1e-14);
        assert!((g[1] - (-10.0 - s)).abs() < 1e-14);
    }

    #[test]
    fn fourbranch_examples() {
        assert!(fourbranch_lsf(3, 0.0).is_err());
        let p = fourbranch_lsf(2, 0.0).unwrap();
        // branches at the origin: (3, 3, 7/sqrt2, 7/sqrt2)
        assert!((p.eval(&[0.0, 0.0]) - 3.0).abs() < 1e-15);
        // tie at the origin resolves to branch 1
        let g = p.grad(&[0.0, 0.0]);
        let s = 1.0 / 2f64.sqrt();
        assert!((g[0] + s).abs() < 1e-15 && (g[1] + s).abs() < 1e-15);
        // branch 3 wins for strongly negative diagonal
        let g3 = p.grad(&[-6.0, 6.0]);
        assert_eq!(g3, vec![1.0, -1.0]);
    }

    #[test]
    fn gradient_check_examples() {
        let lin = linear_lsf(5, 4.0).unwrap();
        let err = gradient_check(&lin, &[0.3, -0.2, 0.7, 0.0, 1.4], 1e-5).unwrap();
        assert!(err < 1e-9, "linear central differences are exact, got {err}");

        let quad = quadratic_lsf(2, 4.0, 10.0).unwrap();
        let err = gradient_check(&quad, &[0.3, -0.7], 1e-5).unwrap();
        assert!(err < 1e-6);

        let fb = fourbranch_lsf(2, 0.0).unwrap();
        // away from any branch tie
        let err = gradient_check(&fb, &[0.5, 0.1], 1e-6).unwrap();
        assert!(err < 1e-5);
    }

    #[test]
    fn gradient_check_random_points_all_problems() {
        let problems: Vec<LimitStateProblem> = vec![
            linear_lsf(10, 4.0).unwrap(),
            quadratic_lsf(10, 4.0, 10.0).unwrap(),
            fourbranch_lsf(2, 0.0).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for p in &problems {
            let mut checked = 0;
            while checked < 100 {
                let x = sample_point(&mut rng, p.dim());
                if p.name() == "fourbranch" {
                    let b = fourbranch_branches(&x);
                    let mut sorted = b;
                    sorted.sort_by(|a, c| a.partial_cmp(c).unwrap());
                    if (sorted[1] - sorted[0]).abs() < 1e-3 {
                        continue; // skip branch-tie sets
                    }
                }
                let err = gradient_check(p, &x, 1e-5).unwrap();
                assert!(err < 1e-5, "{}: gradient error {err} at {x:?}", p.name());
                checked += 1;
            }
        }
    }

    #[test]
    fn counters_track_invocations() {
        let p = linear_lsf(3, 1.0).unwrap();
        let x = [0.0, 0.0, 0.0];
        for _ in 0..5 {
            p.eval(&x);
        }
        for _ in 0..3 {
            p.grad(&x);
        }
        assert_eq!(p.model_calls(), 5);
        assert_eq!(p.gradient_calls(), 3);
        // clones share the definition but not the tallies
        let q = p.clone();
        assert_eq!(q.model_calls(), 0);
        q.eval(&x);
        assert_eq!(q.model_calls(), 1);
        assert_eq!(p.model_calls(), 5);
    }

    #[test]
    fn counters_are_thread_safe() {
        let p = std::sync::Arc::new(linear_lsf(2, 1.0).unwrap());
        let mut handles = Vec::new();
        for _ in 0..4 {
            let p = std::sync::Arc::clone(&p);
            handles.push(std::thread::spawn(move || {
                for _ in 0..250 {
                    p.eval(&[0.1, 0.2]);
                }
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(p.model_calls(), 1000);
    }
}
