//! Krylov iterations on the kernel matrix: preconditioned conjugate gradients
//! with a two-sided bracket on the quadratic form `yᵀK⁻¹y`, and the Lanczos
//! recurrence with full reorthogonalization feeding the quadrature module.
//!
//! States are single-owner mutable values; advance one state from one thread
//! only. Independent probes' Lanczos states can run in parallel.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{woodbury_solve, LinalgError, LowRankFactor, SymmetricMatrix, TridiagonalMatrix};

/// Relative threshold on the Lanczos off-diagonal below which the Krylov
/// subspace is declared invariant.
const BETA_BREAKDOWN_REL: f64 = 1e-12;

/// CG residual is recomputed from scratch this often to bound recursion drift.
const RESIDUAL_REFRESH_EVERY: usize = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KrylovError {
    #[error("conjugate gradients broke down at iteration {iteration}: pᵀKp = {value:.3e}")]
    Breakdown { iteration: usize, value: f64 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Read-only access to a symmetric positive definite operator.
pub trait MatVec {
    fn dim(&self) -> usize;
    fn matvec(&self, x: &DVector<f64>) -> DVector<f64>;
    /// Largest diagonal entry, used as a scale proxy in breakdown thresholds.
    fn scale(&self) -> f64;
}

impl MatVec for SymmetricMatrix {
    fn dim(&self) -> usize {
        self.n()
    }

    fn matvec(&self, x: &DVector<f64>) -> DVector<f64> {
        SymmetricMatrix::matvec(self, x)
    }

    fn scale(&self) -> f64 {
        self.diag_max()
    }
}

/// A matrix-free operator backed by a closure.
pub struct FnOperator<F: Fn(&DVector<f64>) -> DVector<f64>> {
    pub dim: usize,
    pub scale: f64,
    pub apply: F,
}

impl<F: Fn(&DVector<f64>) -> DVector<f64>> MatVec for FnOperator<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn matvec(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.apply)(x)
    }

    fn scale(&self) -> f64 {
        self.scale
    }
}

/// Low-rank-plus-noise preconditioner `K̂ = LLᵀ + σ²I`. A rank-0 factor makes
/// it the plain scaled identity `σ²I`, which reduces every preconditioned
/// quantity to its unpreconditioned form.
#[derive(Debug, Clone)]
pub struct Preconditioner {
    low_rank: LowRankFactor,
    noise_variance: f64,
}

impl Preconditioner {
    pub fn new(low_rank: LowRankFactor, noise_variance: f64) -> Self {
        assert!(noise_variance > 0.0);
        Self { low_rank, noise_variance }
    }

    pub fn scaled_identity(n: usize, noise_variance: f64) -> Self {
        Self::new(LowRankFactor::empty(n), noise_variance)
    }

    pub fn rank(&self) -> usize {
        self.low_rank.rank()
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn low_rank(&self) -> &LowRankFactor {
        &self.low_rank
    }

    /// Applies `K̂⁻¹` through the Woodbury identity.
    pub fn solve(&self, r: &DVector<f64>) -> Result<DVector<f64>, LinalgError> {
        woodbury_solve(&self.low_rank, self.noise_variance, r)
    }
}

/// Quadratic-form bracket at an arbitrary iterate `v` with residual
/// `r = y - Kv`:
/// `2rᵀv + vᵀKv  ≤  yᵀK⁻¹y  ≤  rᵀr/σ² + 2rᵀv + vᵀKv`.
pub fn quad_bounds(v: &DVector<f64>, r: &DVector<f64>, k: &impl MatVec, sigma2: f64) -> (f64, f64) {
    let kv = k.matvec(v);
    let lower = 2.0 * r.dot(v) + v.dot(&kv);
    let upper = lower + r.dot(r) / sigma2;
    (lower, upper)
}

/// Tighter upper bound using the preconditioner: `rᵀK̂⁻¹r + 2rᵀv + vᵀKv`.
/// Valid because `K̂ = LLᵀ + σ²I ⪯ K` whenever `L` is a partial Cholesky
/// factor of `K - σ²I`. Returns `(lower, upper)`.
pub fn precond_quad_bound(
    v: &DVector<f64>,
    r: &DVector<f64>,
    k: &impl MatVec,
    precond: &Preconditioner,
) -> Result<(f64, f64), LinalgError> {
    let kv = k.matvec(v);
    let lower = 2.0 * r.dot(v) + v.dot(&kv);
    let upper = lower + r.dot(&precond.solve(r)?);
    Ok((lower, upper))
}

/// State of the (preconditioned) conjugate gradient iteration on `Kv = y`,
/// carrying both the current-iterate bracket and its running envelope
/// (intersection over iterations, which is monotone by construction and
/// still contains the exact quadratic form).
#[derive(Debug, Clone)]
pub struct CgState {
    v: DVector<f64>,
    r: DVector<f64>,
    p: DVector<f64>,
    rz: f64,
    iterations: usize,
    lower: f64,
    upper: f64,
    best_lower: f64,
    best_upper: f64,
}

impl CgState {
    /// Initializes CG at `v0` (zero when absent; pass the previous outer
    /// step's solution to warm start). The same preconditioner must be used
    /// for every subsequent [`CgState::step`].
    pub fn new(
        k: &impl MatVec,
        y: &DVector<f64>,
        v0: Option<DVector<f64>>,
        precond: &Preconditioner,
    ) -> Result<Self, KrylovError> {
        let n = k.dim();
        let v = v0.unwrap_or_else(|| DVector::zeros(n));
        assert_eq!(v.len(), n);
        let r = y - k.matvec(&v);
        let z = precond.solve(&r)?;
        let rz = r.dot(&z);
        let mut state = Self {
            p: z,
            rz,
            v,
            r,
            iterations: 0,
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
            best_lower: f64::NEG_INFINITY,
            best_upper: f64::INFINITY,
        };
        state.refresh_bounds(y, precond);
        Ok(state)
    }

    pub fn v(&self) -> &DVector<f64> {
        &self.v
    }

    pub fn residual(&self) -> &DVector<f64> {
        &self.r
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Current-iterate bracket on `yᵀK⁻¹y`.
    pub fn bounds(&self) -> (f64, f64) {
        (self.lower, self.upper)
    }

    /// Monotone envelope of all brackets seen so far.
    pub fn envelope(&self) -> (f64, f64) {
        (self.best_lower, self.best_upper)
    }

    /// Whether the residual has collapsed to rounding level.
    pub fn converged(&self, y: &DVector<f64>) -> bool {
        self.r.norm() <= 1e-14 * y.norm().max(1.0)
    }

    /// Exploits `Kv = y - r` so the bracket costs no extra matrix product.
    fn refresh_bounds(&mut self, y: &DVector<f64>, precond: &Preconditioner) {
        let lower = y.dot(&self.v) + self.r.dot(&self.v);
        let upper = lower
            + match precond.solve(&self.r) {
                Ok(z) => self.r.dot(&z),
                Err(_) => self.r.dot(&self.r) / precond.noise_variance(),
            };
        self.lower = lower;
        self.upper = upper;
        self.best_lower = self.best_lower.max(lower);
        self.best_upper = self.best_upper.min(upper);
    }

    /// One preconditioned CG iteration. The K-norm error is nonincreasing;
    /// the bracket is refreshed afterwards.
    pub fn step(
        &mut self,
        k: &impl MatVec,
        y: &DVector<f64>,
        precond: &Preconditioner,
    ) -> Result<(), KrylovError> {
        if self.converged(y) {
            return Ok(());
        }
        let kp = k.matvec(&self.p);
        let pkp = self.p.dot(&kp);
        if pkp <= 0.0 || !pkp.is_finite() {
            return Err(KrylovError::Breakdown { iteration: self.iterations, value: pkp });
        }
        let alpha = self.rz / pkp;
        self.v.axpy(alpha, &self.p, 1.0);
        self.r.axpy(-alpha, &kp, 1.0);
        self.iterations += 1;
        if self.iterations % RESIDUAL_REFRESH_EVERY == 0 {
            self.r = y - k.matvec(&self.v);
        }
        let z = precond.solve(&self.r)?;
        let rz_new = self.r.dot(&z);
        let beta = rz_new / self.rz;
        self.p = &z + &self.p * beta;
        self.rz = rz_new;
        self.refresh_bounds(y, precond);
        Ok(())
    }

    /// Drift between the recursively updated residual and `y - Kv`.
    pub fn residual_drift(&self, k: &impl MatVec, y: &DVector<f64>) -> f64 {
        (y - k.matvec(&self.v) - &self.r).norm()
    }
}

/// Lanczos recurrence with full (two-pass classical Gram–Schmidt)
/// reorthogonalization, started at a probe vector `z`.
///
/// After `t` steps the state holds the orthonormal basis `q₁..q_t` (with
/// `q₁ = z/‖z‖`), the Gauss tridiagonal `T_t` (diagonal `α`, couplings
/// `β₁..β_{t-1}`), and the pending off-diagonal `β_t` that a Gauss–Radau
/// extension appends. A pending `β` below `1e-12·scale(K)` flags breakdown:
/// the subspace is invariant and the quadrature is exact from then on.
#[derive(Debug, Clone)]
pub struct LanczosState {
    z: DVector<f64>,
    z_norm2: f64,
    basis: Vec<DVector<f64>>,
    alphas: Vec<f64>,
    betas: Vec<f64>,
    resid: DVector<f64>,
    breakdown: bool,
}

impl LanczosState {
    pub fn new(z: DVector<f64>) -> Self {
        assert!(z.norm() > 0.0, "probe vector must be nonzero");
        let z_norm2 = z.norm_squared();
        Self {
            resid: z.clone(),
            z,
            z_norm2,
            basis: Vec::new(),
            alphas: Vec::new(),
            betas: Vec::new(),
            breakdown: false,
        }
    }

    pub fn t(&self) -> usize {
        self.alphas.len()
    }

    pub fn breakdown(&self) -> bool {
        self.breakdown
    }

    pub fn z(&self) -> &DVector<f64> {
        &self.z
    }

    pub fn z_norm2(&self) -> f64 {
        self.z_norm2
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// Couplings of the Gauss tridiagonal `T_t` (length `t-1`).
    pub fn interior_betas(&self) -> &[f64] {
        &self.betas[..self.betas.len().saturating_sub(1)]
    }

    /// The off-diagonal that would join column `t+1`; `None` after breakdown.
    pub fn extension_beta(&self) -> Option<f64> {
        if self.breakdown || self.betas.is_empty() {
            None
        } else {
            Some(self.betas[self.betas.len() - 1])
        }
    }

    pub fn gauss_tridiagonal(&self) -> TridiagonalMatrix {
        TridiagonalMatrix::new(self.alphas.clone(), self.interior_betas().to_vec())
    }

    /// Basis columns as an `n×t` matrix.
    pub fn basis_matrix(&self) -> DMatrix<f64> {
        let n = self.z.len();
        let t = self.basis.len();
        let mut m = DMatrix::zeros(n, t);
        for (j, q) in self.basis.iter().enumerate() {
            m.set_column(j, q);
        }
        m
    }

    /// Largest deviation of `TᵀT` from the identity.
    pub fn orthonormality_defect(&self) -> f64 {
        let t = self.basis.len();
        let mut worst = 0.0f64;
        for i in 0..t {
            for j in 0..=i {
                let d = self.basis[i].dot(&self.basis[j]) - if i == j { 1.0 } else { 0.0 };
                worst = worst.max(d.abs());
            }
        }
        worst
    }

    /// Appends one column to the basis and one `(α, β)` pair. Returns `false`
    /// without changing the state when the recurrence has already broken down
    /// or exhausted the space.
    pub fn step(&mut self, k: &impl MatVec) -> bool {
        let n = k.dim();
        if self.breakdown || self.basis.len() == n {
            return false;
        }
        let q = if self.t() == 0 {
            &self.resid / self.resid.norm()
        } else {
            &self.resid / self.betas[self.betas.len() - 1]
        };
        let mut w = k.matvec(&q);
        let alpha = q.dot(&w);
        w.axpy(-alpha, &q, 1.0);
        if self.t() > 0 {
            let beta_prev = self.betas[self.betas.len() - 1];
            let q_prev = &self.basis[self.basis.len() - 1];
            w.axpy(-beta_prev, q_prev, 1.0);
        }
        self.basis.push(q);
        // Two passes of classical Gram–Schmidt against the whole basis.
        for _ in 0..2 {
            for b in &self.basis {
                let c = b.dot(&w);
                w.axpy(-c, b, 1.0);
            }
        }
        let beta = w.norm();
        self.alphas.push(alpha);
        self.betas.push(beta);
        self.resid = w;
        if beta <= BETA_BREAKDOWN_REL * k.scale() || self.basis.len() == n {
            self.breakdown = true;
        }
        true
    }
}
