//! Block-update hyperparameter learning: Adam ascends the adaptive LML
//! estimate in the unconstrained parameterization while the Krylov
//! auxiliaries are refreshed by the estimator itself; the CG solution is
//! carried between outer steps as a warm start. Also posterior-mean
//! prediction and RMSE for evaluation.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::estimator::{derive_seed, estimate_lml, EstimatorConfig, EstimatorError};
use crate::kernel::{cross_kernel, kernel_matrix, kernel_matrix_noise_free, Hyperparameters, UnconstrainedParams};
use crate::krylov::{CgState, Preconditioner};
use crate::linalg::pivoted_cholesky;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

/// Bias-corrected Adam moments. The update direction is ascent: the
/// objective is maximized.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: usize,
    first_moment: DVector<f64>,
    second_moment: DVector<f64>,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl AdamState {
    pub fn new(n_coords: usize, learning_rate: f64) -> Self {
        Self {
            step: 0,
            first_moment: DVector::zeros(n_coords),
            second_moment: DVector::zeros(n_coords),
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One ascent step `params += lr · m̂ / (√v̂ + eps)`.
    pub fn step(&mut self, params: &mut UnconstrainedParams, grad: &DVector<f64>) {
        assert_eq!(params.len(), grad.len());
        self.step += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let correction1 = 1.0 - b1.powi(self.step as i32);
        let correction2 = 1.0 - b2.powi(self.step as i32);
        for i in 0..grad.len() {
            let g = grad[i];
            self.first_moment[i] = b1 * self.first_moment[i] + (1.0 - b1) * g;
            self.second_moment[i] = b2 * self.second_moment[i] + (1.0 - b2) * g * g;
            let m_hat = self.first_moment[i] / correction1;
            let v_hat = self.second_moment[i] / correction2;
            params.coords[i] += self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

/// Outer-loop configuration on top of the estimator's.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub estimator: EstimatorConfig,
    pub steps: usize,
    pub learning_rate: f64,
    /// Test RMSE is computed every this many outer steps (and at the final
    /// step). Prediction is the expensive part of evaluation.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            estimator: EstimatorConfig::default(),
            steps: 500,
            learning_rate: 0.1,
            eval_every: 10,
        }
    }
}

/// One record per outer step: the surrogate value (a stochastic lower bound
/// on the LML, in nats), its certified bias, work counters, the evaluated
/// hyperparameters, and test RMSE when the cadence fired.
#[derive(Debug, Clone)]
pub struct TraceRecord {
    pub step: usize,
    pub objective: f64,
    pub bias_bound: f64,
    pub iterations: usize,
    pub lanczos_steps: Vec<usize>,
    pub converged: bool,
    pub rmse: Option<f64>,
    pub hyperparameters: Hyperparameters,
    pub duration: Duration,
}

#[derive(Debug, Clone, Default)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    /// Total inner (lockstep Krylov) iterations across the run.
    pub fn total_iterations(&self) -> usize {
        self.records.iter().map(|r| r.iterations).sum()
    }
}

/// Optional per-step evaluation callback: receives the step index and the
/// hyperparameters just evaluated, returns a test RMSE if it computed one.
pub type EvalHook<'a> = &'a mut dyn FnMut(usize, &Hyperparameters) -> Option<f64>;

/// Learns hyperparameters by `cfg.steps` outer steps starting from the
/// standard initialization. Each step assembles the kernel objects, runs the
/// adaptive estimator (CG warm-started with the previous solution, fresh
/// probes), records a trace entry, and takes one Adam ascent step. An inner
/// round that hits its iteration cap is recorded, not fatal.
///
/// Returns the hyperparameters of the final record (the last evaluated
/// point) with the full trace.
pub fn fit(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    cfg: &TrainConfig,
    mut eval_hook: Option<EvalHook<'_>>,
) -> Result<(Hyperparameters, TrainTrace), TrainError> {
    let d = x.ncols();
    let mut params = Hyperparameters::init(d).to_unconstrained();
    let mut adam = AdamState::new(params.len(), cfg.learning_rate);
    let mut trace = TrainTrace::default();
    let mut warm_v: Option<DVector<f64>> = None;

    for step in 1..=cfg.steps {
        let started = Instant::now();
        let hp = params.to_hyperparameters();
        let mut step_cfg = cfg.estimator.clone();
        step_cfg.seed = derive_seed(cfg.estimator.seed, step as u64);
        let est = estimate_lml(x, y, &hp, &step_cfg, warm_v.take())?;

        let rmse_value = match eval_hook.as_mut() {
            Some(hook) if step % cfg.eval_every == 0 || step == cfg.steps => hook(step, &hp),
            _ => None,
        };
        trace.records.push(TraceRecord {
            step,
            objective: est.value,
            bias_bound: est.bias_bound,
            iterations: est.iterations,
            lanczos_steps: est.lanczos_steps.clone(),
            converged: est.converged,
            rmse: rmse_value,
            hyperparameters: hp.clone(),
            duration: started.elapsed(),
        });

        if step < cfg.steps {
            adam.step(&mut params, &est.gradient);
        }
        warm_v = Some(est.aux.v);
    }

    let final_hp = trace
        .last()
        .map(|r| r.hyperparameters.clone())
        .unwrap_or_else(|| Hyperparameters::init(d));
    Ok((final_hp, trace))
}

/// Posterior-mean prediction with its convergence flag. Hitting the CG
/// iteration cap is reported, not fatal: the best iterate is used.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub values: DVector<f64>,
    pub converged: bool,
}

/// Posterior mean `μ₀ + K_*ᵀ α` with `K α = (y - μ₀1)` solved by
/// preconditioned CG to `‖r‖ ≤ tol·‖y - μ₀1‖`.
pub fn predict_mean(
    x_train: &DMatrix<f64>,
    y_train: &DVector<f64>,
    x_test: &DMatrix<f64>,
    hp: &Hyperparameters,
    tol: f64,
) -> Result<Prediction, TrainError> {
    assert!(tol > 0.0, "tolerance must be positive");
    let n = x_train.nrows();
    let k = kernel_matrix(x_train, hp);
    let centered = hp.center(y_train);
    let precond = Preconditioner::new(
        pivoted_cholesky(&kernel_matrix_noise_free(x_train, hp), 100.min(n), 0.0),
        hp.noise_variance,
    );
    let mut cg = CgState::new(&k, &centered, None, &precond).map_err(EstimatorError::from)?;
    let target = tol * centered.norm();
    let max_iters = (4 * n).max(100);
    let mut converged = false;
    for _ in 0..max_iters {
        if cg.residual().norm() <= target {
            converged = true;
            break;
        }
        cg.step(&k, &centered, &precond).map_err(EstimatorError::from)?;
    }
    if cg.residual().norm() <= target {
        converged = true;
    }
    let cross = cross_kernel(x_train, x_test, hp);
    let values = cross.transpose() * cg.v() + DVector::from_element(x_test.nrows(), hp.mean);
    Ok(Prediction { values, converged })
}

/// Root mean squared error in the units of its arguments.
pub fn rmse(pred: &DVector<f64>, truth: &DVector<f64>) -> Result<f64, TrainError> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(TrainError::LengthMismatch { left: pred.len(), right: truth.len() });
    }
    let mse = (pred - truth).norm_squared() / pred.len() as f64;
    Ok(mse.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::exact_lml;
    use crate::linalg::cholesky;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn synthetic(n: usize, d: usize, hp: &Hyperparameters, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, d, |_, _| rng.random::<f64>());
        let k = kernel_matrix(&x, hp);
        let factor = cholesky(&k).unwrap();
        let l = factor.to_dmatrix();
        let normals = DVector::from_fn(n, |_, _| {
            // Box–Muller from two uniforms.
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        });
        let y = l * normals + DVector::from_element(n, hp.mean);
        (x, y)
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut params = Hyperparameters::init(2).to_unconstrained();
        let before = params.clone();
        let mut adam = AdamState::new(params.len(), 0.1);
        let zeros = DVector::zeros(params.len());
        adam.step(&mut params, &zeros);
        assert_eq!(params, before);
    }

    #[test]
    fn adam_first_step_magnitude_is_learning_rate() {
        let mut params = UnconstrainedParams { coords: vec![0.0, 0.0, 0.0] };
        let mut adam = AdamState::new(3, 0.1);
        adam.step(&mut params, &DVector::from_vec(vec![3.0, -0.02, 700.0]));
        for (i, c) in params.coords.iter().enumerate() {
            assert!(
                (c.abs() - 0.1).abs() < 1e-6,
                "coordinate {i} moved by {c}, expected ±0.1"
            );
        }
        assert!(params.coords[0] > 0.0 && params.coords[1] < 0.0 && params.coords[2] > 0.0);
    }

    #[test]
    fn adam_constant_gradient_steps_do_not_grow() {
        let mut params = UnconstrainedParams { coords: vec![0.0] };
        let mut adam = AdamState::new(1, 0.1);
        let grad = DVector::from_vec(vec![0.7]);
        adam.step(&mut params, &grad);
        let first = params.coords[0];
        adam.step(&mut params, &grad);
        let second = params.coords[0] - first;
        assert!(second <= first + 1e-9, "second step {second} exceeds first {first}");
    }

    #[test]
    fn rmse_examples() {
        let zero = rmse(
            &DVector::from_vec(vec![1.0, 2.0]),
            &DVector::from_vec(vec![1.0, 2.0]),
        )
        .unwrap();
        assert_relative_eq!(zero, 0.0, epsilon = 1e-15);
        let v = rmse(
            &DVector::from_vec(vec![3.0, 4.0]),
            &DVector::from_vec(vec![0.0, 0.0]),
        )
        .unwrap();
        assert_relative_eq!(v, 12.5f64.sqrt(), max_relative = 1e-14);
        assert!((v - 3.5355).abs() < 1e-4);
        // Adding a constant to both leaves it unchanged.
        let shifted = rmse(
            &DVector::from_vec(vec![10.0, 11.0]),
            &DVector::from_vec(vec![7.0, 7.0]),
        )
        .unwrap();
        assert_relative_eq!(v, shifted, max_relative = 1e-14);
        assert!(matches!(
            rmse(&DVector::from_vec(vec![1.0]), &DVector::zeros(2)),
            Err(TrainError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn predict_interpolates_at_low_noise() {
        let hp = Hyperparameters {
            lengthscales: vec![0.4],
            signal_variance: 1.0,
            noise_variance: 1e-6,
            mean: 0.0,
        };
        let (x, y) = synthetic(24, 1, &hp, 5);
        let test = x.clone();
        let pred = predict_mean(&x, &y, &test, &hp, 1e-8).unwrap();
        assert!(pred.converged);
        for i in 0..24 {
            assert!(
                (pred.values[i] - y[i]).abs() <= 1e-2,
                "interpolation off at {i}: {} vs {}",
                pred.values[i],
                y[i]
            );
        }
    }

    #[test]
    fn predict_reverts_to_mean_far_away() {
        let hp = Hyperparameters {
            lengthscales: vec![0.2],
            signal_variance: 1.0,
            noise_variance: 0.1,
            mean: 1.7,
        };
        let (x, y) = synthetic(16, 1, &hp, 6);
        let far = DMatrix::from_row_slice(1, 1, &[500.0]);
        let pred = predict_mean(&x, &y, &far, &hp, 1e-8).unwrap();
        assert_relative_eq!(pred.values[0], hp.mean, max_relative = 1e-6);
    }

    #[test]
    fn predict_matches_dense_solve() {
        let hp = Hyperparameters {
            lengthscales: vec![0.5, 0.8],
            signal_variance: 1.2,
            noise_variance: 0.05,
            mean: 0.3,
        };
        let (x, y) = synthetic(64, 2, &hp, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let test = DMatrix::from_fn(10, 2, |_, _| rng.random::<f64>());
        let pred = predict_mean(&x, &y, &test, &hp, 1e-10).unwrap();
        let k = kernel_matrix(&x, &hp);
        let alpha = cholesky(&k).unwrap().solve(&hp.center(&y));
        let dense = cross_kernel(&x, &test, &hp).transpose() * alpha
            + DVector::from_element(10, hp.mean);
        assert!((pred.values - dense).norm() <= 1e-5);
    }

    #[test]
    fn fit_zero_steps_returns_initialization() {
        let hp = Hyperparameters::init(1);
        let (x, y) = synthetic(12, 1, &hp, 9);
        let cfg = TrainConfig { steps: 0, ..Default::default() };
        let (out, trace) = fit(&x, &y, &cfg, None).unwrap();
        assert_eq!(out, Hyperparameters::init(1));
        assert!(trace.records.is_empty());
    }

    #[test]
    fn fit_traces_are_reproducible() {
        let gen_hp = Hyperparameters {
            lengthscales: vec![0.3],
            signal_variance: 1.0,
            noise_variance: 0.1,
            mean: 0.0,
        };
        let (x, y) = synthetic(48, 1, &gen_hp, 10);
        let cfg = TrainConfig {
            steps: 6,
            estimator: EstimatorConfig { seed: 3, precond_rank: 10, ..Default::default() },
            ..Default::default()
        };
        let (hp_a, trace_a) = fit(&x, &y, &cfg, None).unwrap();
        let (hp_b, trace_b) = fit(&x, &y, &cfg, None).unwrap();
        assert_eq!(hp_a, hp_b);
        for (a, b) in trace_a.records.iter().zip(trace_b.records.iter()) {
            assert_eq!(a.objective.to_bits(), b.objective.to_bits());
            assert_eq!(a.bias_bound.to_bits(), b.bias_bound.to_bits());
            assert_eq!(a.iterations, b.iterations);
        }
    }

    #[test]
    fn fit_objective_is_stochastic_lower_bound() {
        // Pointwise, each record must stay below its own probe-conditional
        // fully converged value; relative to the exact LML the bound holds in
        // expectation, so individual records may overshoot by probe noise.
        let gen_hp = Hyperparameters {
            lengthscales: vec![0.3, 0.3],
            signal_variance: 1.0,
            noise_variance: 0.1,
            mean: 0.0,
        };
        let (x, y) = synthetic(128, 2, &gen_hp, 11);
        let cfg = TrainConfig {
            steps: 25,
            estimator: EstimatorConfig { seed: 1, precond_rank: 30, ..Default::default() },
            ..Default::default()
        };
        let (_, trace) = fit(&x, &y, &cfg, None).unwrap();
        let mut gap_sum = 0.0f64;
        for rec in &trace.records {
            let oracle = exact_lml(&x, &y, &rec.hyperparameters).unwrap();
            let mut full_cfg = cfg.estimator.clone();
            full_cfg.seed = derive_seed(cfg.estimator.seed, rec.step as u64);
            full_cfg.epsilon = 1e-14;
            full_cfg.max_krylov_iters = Some(128);
            let full = estimate_lml(&x, &y, &rec.hyperparameters, &full_cfg, None).unwrap();
            assert!(
                rec.objective <= full.value + 1e-6,
                "step {}: objective {} above its converged target {}",
                rec.step,
                rec.objective,
                full.value
            );
            gap_sum += rec.objective - oracle;
        }
        let mean_gap = gap_sum / trace.records.len() as f64;
        assert!(
            mean_gap <= 1e-6,
            "mean objective-minus-exact gap {mean_gap} is positive: not a lower bound on average"
        );
        println!("mean objective-minus-exact gap: {mean_gap:.4} nats");
    }

    #[test]
    fn warm_starts_reduce_total_iterations() {
        let gen_hp = Hyperparameters {
            lengthscales: vec![0.4],
            signal_variance: 1.0,
            noise_variance: 0.1,
            mean: 0.0,
        };
        let mut violations = 0;
        for seed in 0..5u64 {
            let (x, y) = synthetic(96, 1, &gen_hp, 20 + seed);
            let cfg = TrainConfig {
                steps: 50,
                estimator: EstimatorConfig { seed, precond_rank: 20, ..Default::default() },
                ..Default::default()
            };
            let (_, warm_trace) = fit(&x, &y, &cfg, None).unwrap();

            // Same loop without carrying v between steps.
            let mut params = Hyperparameters::init(1).to_unconstrained();
            let mut adam = AdamState::new(params.len(), cfg.learning_rate);
            let mut cold_total = 0usize;
            for step in 1..=cfg.steps {
                let hp = params.to_hyperparameters();
                let mut step_cfg = cfg.estimator.clone();
                step_cfg.seed = derive_seed(cfg.estimator.seed, step as u64);
                let est = estimate_lml(&x, &y, &hp, &step_cfg, None).unwrap();
                cold_total += est.iterations;
                if step < cfg.steps {
                    adam.step(&mut params, &est.gradient);
                }
            }
            if warm_trace.total_iterations() > cold_total {
                violations += 1;
            }
        }
        assert!(violations <= 1, "warm start slower in {violations}/5 runs");
    }

    #[test]
    fn fit_eval_hook_cadence() {
        let gen_hp = Hyperparameters {
            lengthscales: vec![0.4],
            signal_variance: 1.0,
            noise_variance: 0.1,
            mean: 0.0,
        };
        let (x, y) = synthetic(32, 1, &gen_hp, 30);
        let cfg = TrainConfig {
            steps: 7,
            eval_every: 3,
            estimator: EstimatorConfig { precond_rank: 0, ..Default::default() },
            ..Default::default()
        };
        let mut calls = Vec::new();
        let mut hook = |step: usize, _hp: &Hyperparameters| {
            calls.push(step);
            Some(step as f64)
        };
        let (_, trace) = fit(&x, &y, &cfg, Some(&mut hook)).unwrap();
        assert_eq!(calls, vec![3, 6, 7]);
        for rec in &trace.records {
            match rec.step {
                3 | 6 | 7 => assert_eq!(rec.rmse, Some(rec.step as f64)),
                _ => assert_eq!(rec.rmse, None),
            }
        }
    }
}
