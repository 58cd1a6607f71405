//! Executable validation of the estimator's mathematical guarantees on
//! randomly generated instances: the projection-log domination property, the
//! quadrature sandwich, the CG bracket, and gradient/finite-difference
//! agreement. Used by the `validate-bounds` command and reused by tests.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::estimator::{estimate_lml, frozen_objective, EstimatorConfig};
use crate::kernel::{exact_lml, kernel_matrix, kernel_matrix_noise_free, Hyperparameters};
use crate::krylov::{CgState, LanczosState, Preconditioner};
use crate::linalg::{cholesky, log_matrix, pivoted_cholesky, sym_eigen, SymmetricMatrix};
use crate::quadrature::{gauss_logdet_estimate, radau_estimate, SpectralEnvelope};

/// Options of one validation run. `swap_radau_nodes` is a fault-injection
/// hook: it exchanges the roles of the two prescribed nodes in the sandwich
/// check, which must make that check fail.
#[derive(Debug, Clone)]
pub struct ValidateOptions {
    pub trials: usize,
    pub seed: u64,
    pub swap_radau_nodes: bool,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        Self { trials: 20, seed: 0, swap_radau_nodes: false }
    }
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: &'static str,
    pub passed: usize,
    pub failed: usize,
}

impl CheckReport {
    pub fn ok(&self) -> bool {
        self.failed == 0 && self.passed > 0
    }
}

/// Random Matérn regression instance on the unit cube.
pub fn random_instance(
    n: usize,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> (DMatrix<f64>, DVector<f64>, Hyperparameters) {
    let x = DMatrix::from_fn(n, d, |_, _| rng.random::<f64>());
    let mut sample = |lo: f64, hi: f64| {
        let u: f64 = rng.random();
        (lo.ln() + u * (hi.ln() - lo.ln())).exp()
    };
    let hp = Hyperparameters {
        lengthscales: (0..d).map(|_| sample(0.2, 1.5)).collect(),
        signal_variance: sample(0.4, 2.5),
        noise_variance: sample(0.05, 0.5),
        mean: rng.random::<f64>() - 0.5,
    };
    let y = DVector::from_fn(n, |_, _| 2.0 * rng.random::<f64>() - 1.0);
    (x, y, hp)
}

/// Random SPD matrix from a Gaussian Gram construction.
pub fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> SymmetricMatrix {
    let g = DMatrix::from_fn(n, n, |_, _| {
        let v: f64 = StandardNormal.sample(rng);
        v
    });
    let gt = g.transpose();
    let prod = &gt * &g;
    SymmetricMatrix::from_fn_lower(n, |i, j| prod[(i, j)] / n as f64 + if i == j { 0.2 } else { 0.0 })
}

/// Random matrix with orthonormal columns (Gram–Schmidt, two passes).
pub fn random_orthonormal(n: usize, t: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    assert!(t <= n);
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(t);
    while cols.len() < t {
        let mut v = DVector::from_fn(n, |_, _| {
            let g: f64 = StandardNormal.sample(rng);
            g
        });
        for _ in 0..2 {
            for c in &cols {
                let proj = c.dot(&v);
                v.axpy(-proj, c, 1.0);
            }
        }
        let norm = v.norm();
        if norm > 1e-8 {
            cols.push(v / norm);
        }
    }
    let mut m = DMatrix::zeros(n, t);
    for (j, c) in cols.iter().enumerate() {
        m.set_column(j, c);
    }
    m
}

fn rademacher(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 })
}

/// `log(TᵀKT) - Tᵀlog(K)T` must be positive semi-definite for any matrix `T`
/// with orthonormal columns.
pub fn check_projection_psd(opts: &ValidateOptions) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let mut report = CheckReport { name: "projection-log-psd", passed: 0, failed: 0 };
    for trial in 0..opts.trials.max(1) {
        let n = 2 + trial % 15; // up to 16
        let t = 1 + rng.random_range(0..n.max(2) - 1).min(n - 1);
        let k = if trial % 2 == 0 {
            random_spd(n, &mut rng)
        } else {
            let (x, _, hp) = random_instance(n, 2, &mut rng);
            kernel_matrix(&x, &hp)
        };
        let basis = random_orthonormal(n, t, &mut rng);
        let log_k = match log_matrix(&k) {
            Ok(v) => v,
            Err(_) => {
                report.failed += 1;
                continue;
            }
        };
        let projected = basis.transpose() * k.as_dmatrix() * &basis;
        let projected_log = basis.transpose() * log_k.as_dmatrix() * &basis;
        let m = match SymmetricMatrix::new(projected).and_then(|m| log_matrix(&m)) {
            Ok(v) => v,
            Err(_) => {
                report.failed += 1;
                continue;
            }
        };
        let diff = match SymmetricMatrix::new(m.as_dmatrix() - projected_log) {
            Ok(v) => v,
            Err(_) => {
                report.failed += 1;
                continue;
            }
        };
        match sym_eigen(&diff) {
            Ok(eig) if eig.values[0] >= -1e-8 => report.passed += 1,
            _ => report.failed += 1,
        }
    }
    report
}

/// Per probe and per step `t ≥ 2`:
/// `Radau(σ² node) ≤ zᵀlog(K)z ≤ min(Gauss, Radau(ceiling node))`.
pub fn check_sandwich(opts: &ValidateOptions) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(2));
    let mut report = CheckReport { name: "quadrature-sandwich", passed: 0, failed: 0 };
    for trial in 0..opts.trials.max(1) {
        let n = [1usize, 8, 16, 24, 32][trial % 5];
        let (x, _, hp) = random_instance(n, 2.min(n), &mut rng);
        let k = kernel_matrix(&x, &hp);
        let envelope = SpectralEnvelope::from_matrix(&k, hp.noise_variance);
        let z = rademacher(n, &mut rng);
        let oracle = match log_matrix(&k) {
            Ok(lk) => z.dot(&lk.matvec(&z)),
            Err(_) => {
                report.failed += 1;
                continue;
            }
        };
        let mut state = LanczosState::new(z);
        for _ in 0..n {
            if !state.step(&k) {
                break;
            }
            if state.t() < 2 {
                continue;
            }
            let tri = state.gauss_tridiagonal();
            let gauss = match gauss_logdet_estimate(&tri, state.z_norm2()) {
                Ok(v) => v,
                Err(_) => {
                    report.failed += 1;
                    continue;
                }
            };
            let Some(beta) = state.extension_beta() else {
                // Breakdown: exact value, trivially sandwiched.
                report.passed += 1;
                continue;
            };
            let (lower_node, upper_node) = if opts.swap_radau_nodes {
                (envelope.lambda_max_ceiling, envelope.lambda_min_floor)
            } else {
                (envelope.lambda_min_floor, envelope.lambda_max_ceiling)
            };
            let lo = radau_estimate(&tri, beta, lower_node, state.z_norm2());
            let hi = radau_estimate(&tri, beta, upper_node, state.z_norm2());
            match (lo, hi) {
                (Ok(lo), Ok(hi)) => {
                    let upper = hi.min(gauss);
                    if lo - 1e-8 <= oracle && oracle <= upper + 1e-8 {
                        report.passed += 1;
                    } else {
                        report.failed += 1;
                    }
                }
                _ => report.failed += 1,
            }
        }
        if n == 1 {
            // Single-row instances break down immediately; count the trivially
            // exact bracket once.
            report.passed += 1;
        }
    }
    report
}

/// The CG bracket must contain the dense-solve quadratic form at every
/// iteration, and the preconditioned upper bound must not exceed the plain
/// `σ²` bound.
pub fn check_cg_bracket(opts: &ValidateOptions) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(3));
    let mut report = CheckReport { name: "cg-bracket", passed: 0, failed: 0 };
    for trial in 0..opts.trials.max(1) {
        let n = [1usize, 12, 24, 40][trial % 4];
        let (x, y, hp) = random_instance(n, 2.min(n), &mut rng);
        let k = kernel_matrix(&x, &hp);
        let centered = hp.center(&y);
        let exact = match cholesky(&k) {
            Ok(f) => centered.dot(&f.solve(&centered)),
            Err(_) => {
                report.failed += 1;
                continue;
            }
        };
        let plain = Preconditioner::scaled_identity(n, hp.noise_variance);
        let precond = Preconditioner::new(
            pivoted_cholesky(&kernel_matrix_noise_free(&x, &hp), (n / 3).max(1), 0.0),
            hp.noise_variance,
        );
        let run = |pre: &Preconditioner, rng_state: &mut CheckReport, compare: Option<&[f64]>| {
            let mut uppers = Vec::new();
            let mut state = match CgState::new(&k, &centered, None, pre) {
                Ok(s) => s,
                Err(_) => {
                    rng_state.failed += 1;
                    return uppers;
                }
            };
            for _ in 0..n.min(24) {
                if state.step(&k, &centered, pre).is_err() {
                    rng_state.failed += 1;
                    return uppers;
                }
                let (lo, hi) = state.bounds();
                uppers.push(hi);
                let slack = 1e-8 * exact.abs().max(1.0);
                if lo <= exact + slack && exact <= hi + slack {
                    rng_state.passed += 1;
                } else {
                    rng_state.failed += 1;
                }
            }
            if let Some(sigma_uppers) = compare {
                for (pre_hi, sig_hi) in uppers.iter().zip(sigma_uppers.iter()) {
                    if *pre_hi <= *sig_hi + 1e-8 * sig_hi.abs().max(1.0) {
                        rng_state.passed += 1;
                    } else {
                        rng_state.failed += 1;
                    }
                }
            }
            uppers
        };
        let sigma_uppers = run(&plain, &mut report, None);
        run(&precond, &mut report, Some(&sigma_uppers));
    }
    report
}

/// Full frozen-auxiliary gradient against central finite differences.
pub fn check_gradient_fd(opts: &ValidateOptions) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(4));
    let mut report = CheckReport { name: "gradient-fd", passed: 0, failed: 0 };
    for trial in 0..opts.trials.max(1) {
        let n = [1usize, 8, 16, 24][trial % 4];
        let (x, y, hp) = random_instance(n, 2.min(n), &mut rng);
        let cfg = EstimatorConfig {
            epsilon: 1e-10,
            max_krylov_iters: Some((n / 2).max(2)),
            precond_rank: 0,
            seed: opts.seed.wrapping_add(trial as u64),
            ..Default::default()
        };
        let est = match estimate_lml(&x, &y, &hp, &cfg, None) {
            Ok(e) => e,
            Err(_) => {
                report.failed += 1;
                continue;
            }
        };
        let at = hp.to_unconstrained();
        let mut all_ok = true;
        for coord in 0..hp.n_coords() {
            let mut up = at.clone();
            up.coords[coord] += 1e-4;
            let mut down = at.clone();
            down.coords[coord] -= 1e-4;
            let f = |u: &crate::kernel::UnconstrainedParams| {
                frozen_objective(&x, &y, &u.to_hyperparameters(), &est.aux)
            };
            match (f(&up), f(&down)) {
                (Ok(fu), Ok(fd_val)) => {
                    let fd = (fu - fd_val) / 2e-4;
                    let an = est.gradient[coord];
                    if (fd - an).abs() > 1e-5 * fd.abs().max(an.abs()) + 1e-7 {
                        all_ok = false;
                    }
                }
                _ => all_ok = false,
            }
        }
        if all_ok {
            report.passed += 1;
        } else {
            report.failed += 1;
        }
    }
    report
}

/// Sanity cross-check of the estimator against the exact oracle on tiny
/// white-noise instances (zero probe variance), exercising the n = 1 edge.
pub fn check_exactness_edges(opts: &ValidateOptions) -> CheckReport {
    let mut report = CheckReport { name: "exactness-edges", passed: 0, failed: 0 };
    for n in [1usize, 2, 5] {
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64 * 100.0);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(n as u64));
        let y = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
        let hp = Hyperparameters {
            lengthscales: vec![1e-4],
            signal_variance: 1e-6,
            noise_variance: 0.7,
            mean: 0.1,
        };
        let cfg = EstimatorConfig { precond_rank: 0, ..Default::default() };
        match (estimate_lml(&x, &y, &hp, &cfg, None), exact_lml(&x, &y, &hp)) {
            (Ok(est), Ok(oracle)) if (est.value - oracle).abs() <= 1e-6 => report.passed += 1,
            _ => report.failed += 1,
        }
    }
    report
}

/// Runs every check and returns the reports.
pub fn run_all(opts: &ValidateOptions) -> Vec<CheckReport> {
    vec![
        check_projection_psd(opts),
        check_sandwich(opts),
        check_cg_bracket(opts),
        check_gradient_fd(opts),
        check_exactness_edges(opts),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass_by_default() {
        let opts = ValidateOptions::default();
        for report in run_all(&opts) {
            assert!(
                report.ok(),
                "{}: {} passed, {} failed",
                report.name,
                report.passed,
                report.failed
            );
        }
    }

    #[test]
    fn swapped_radau_nodes_break_the_sandwich() {
        let opts = ValidateOptions { swap_radau_nodes: true, ..Default::default() };
        let report = check_sandwich(&opts);
        assert!(report.failed > 0, "fault injection went undetected");
    }

    #[test]
    fn orthonormal_generator_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = random_orthonormal(10, 4, &mut rng);
        let gram = t.transpose() * &t;
        let defect = (gram - DMatrix::identity(4, 4)).amax();
        assert!(defect <= 1e-10);
    }
}
