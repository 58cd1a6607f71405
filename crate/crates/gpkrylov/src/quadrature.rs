//! Gauss and Gauss–Radau quadrature estimates of `zᵀ log(K) z` built from
//! Lanczos tridiagonals, and the two-sided log-determinant bracket that
//! drives the adaptive stopping rule.
//!
//! For `f = log` the Gauss rule and the Radau rule with its prescribed node
//! at or above `λ_max(K)` both over-estimate `zᵀ log(K) z`, while the Radau
//! rule with its node at or below `λ_min(K)` under-estimates it. The noise
//! variance `σ²` is a certified spectral floor (`K = K_f + σ²I` with `K_f`
//! PSD) and a Gershgorin row sum is a certified ceiling, so the bracket needs
//! no eigenvalue computation on `K` itself.

use thiserror::Error;

use crate::krylov::LanczosState;
use crate::linalg::{tridiag_eigen_weights, LinalgError, SymmetricMatrix, TridiagonalMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadratureError {
    #[error("quadrature node {value:.3e} is not positive; matrix is not numerically SPD")]
    NonPositiveRitzValue { value: f64 },
    #[error("prescribed node {node:.6e} coincides with a Ritz value; take one more Lanczos step")]
    SingularShift { node: f64 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Certified envelope of the spectrum of `K`: the noise variance from below,
/// a Gershgorin bound from above.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralEnvelope {
    pub lambda_min_floor: f64,
    pub lambda_max_ceiling: f64,
}

impl SpectralEnvelope {
    pub fn new(lambda_min_floor: f64, lambda_max_ceiling: f64) -> Self {
        assert!(
            lambda_min_floor > 0.0 && lambda_min_floor <= lambda_max_ceiling,
            "envelope must satisfy 0 < floor <= ceiling"
        );
        Self { lambda_min_floor, lambda_max_ceiling }
    }

    /// Floor from the noise variance, ceiling from [`lambda_max_upper`].
    pub fn from_matrix(k: &SymmetricMatrix, noise_variance: f64) -> Self {
        Self::new(noise_variance, lambda_max_upper(k).max(noise_variance))
    }
}

/// Gershgorin upper bound `max_i Σ_j |K_ij| ≥ λ_max(K)`.
pub fn lambda_max_upper(k: &SymmetricMatrix) -> f64 {
    let n = k.n();
    (0..n)
        .map(|i| (0..n).map(|j| k.get(i, j).abs()).sum::<f64>())
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Gauss quadrature estimate `‖z‖² e₁ᵀ log(T_t) e₁ = ‖z‖² Σ_i (q_{1i})² log λ_i`
/// from the Lanczos tridiagonal. Over-estimates `zᵀ log(K) z`.
pub fn gauss_logdet_estimate(tri: &TridiagonalMatrix, z_norm2: f64) -> Result<f64, QuadratureError> {
    let (values, weights) = tridiag_eigen_weights(tri)?;
    let mut acc = 0.0;
    for (v, w) in values.iter().zip(weights.iter()) {
        if *v <= 0.0 {
            return Err(QuadratureError::NonPositiveRitzValue { value: *v });
        }
        acc += w * w * v.ln();
    }
    Ok(z_norm2 * acc)
}

/// Extends the `t`-step tridiagonal so the quadrature rule acquires `mu` as a
/// prescribed node: solve `(T_t - μI)δ = β_t² e_t` and append the diagonal
/// entry `α̂ = μ + δ_t` with coupling `β_t`.
///
/// Because the right-hand side touches only the last component, forward
/// elimination leaves it untouched and only the final pivot is needed.
pub fn radau_modify(
    tri: &TridiagonalMatrix,
    extension_beta: f64,
    mu: f64,
) -> Result<TridiagonalMatrix, QuadratureError> {
    let diag = tri.diag();
    let off = tri.off();
    let t = tri.order();
    let scale = diag
        .iter()
        .map(|d| (d - mu).abs())
        .fold(1.0f64, f64::max);
    let mut pivot = diag[0] - mu;
    for i in 1..t {
        if pivot.abs() <= 1e-14 * scale {
            return Err(QuadratureError::SingularShift { node: mu });
        }
        pivot = (diag[i] - mu) - off[i - 1] * off[i - 1] / pivot;
    }
    if pivot.abs() <= 1e-14 * scale {
        return Err(QuadratureError::SingularShift { node: mu });
    }
    let delta_t = extension_beta * extension_beta / pivot;
    let mut new_diag = diag.to_vec();
    new_diag.push(mu + delta_t);
    let mut new_off = off.to_vec();
    new_off.push(extension_beta);
    Ok(TridiagonalMatrix::new(new_diag, new_off))
}

/// Gauss–Radau estimate with prescribed node `mu`. With `mu` at or below the
/// spectrum this under-estimates `zᵀ log(K) z`; at or above, it
/// over-estimates it.
pub fn radau_estimate(
    tri: &TridiagonalMatrix,
    extension_beta: f64,
    mu: f64,
    z_norm2: f64,
) -> Result<f64, QuadratureError> {
    let extended = radau_modify(tri, extension_beta, mu)?;
    gauss_logdet_estimate(&extended, z_norm2)
}

/// Per-probe Gauss/Radau estimates of `zᵀ log(K) z` and their aggregate
/// bracket (arithmetic means across probes). A broken-down probe's quadrature
/// is exact, so its bracket collapses onto the Gauss value.
#[derive(Debug, Clone)]
pub struct LogdetBracket {
    pub gauss: Vec<f64>,
    pub radau_lower: Vec<f64>,
    pub radau_upper: Vec<Option<f64>>,
    pub lower: f64,
    pub upper: f64,
    pub probes: usize,
}

impl LogdetBracket {
    /// Mean of the per-probe Gauss estimates; the log-determinant term of the
    /// training objective.
    pub fn gauss_mean(&self) -> f64 {
        self.gauss.iter().sum::<f64>() / self.probes as f64
    }
}

/// Evaluates the two-sided bracket for every probe state. Requires at least
/// one completed Lanczos step per probe (the pending off-diagonal supplies
/// the Radau extension).
pub fn logdet_bracket(
    states: &[LanczosState],
    envelope: &SpectralEnvelope,
) -> Result<LogdetBracket, QuadratureError> {
    assert!(!states.is_empty(), "at least one probe required");
    let s = states.len();
    let mut gauss = Vec::with_capacity(s);
    let mut radau_lower = Vec::with_capacity(s);
    let mut radau_upper = Vec::with_capacity(s);
    for state in states {
        assert!(state.t() >= 1, "Lanczos state has no completed steps");
        let tri = state.gauss_tridiagonal();
        let g = gauss_logdet_estimate(&tri, state.z_norm2())?;
        gauss.push(g);
        match state.extension_beta() {
            None => {
                // Invariant subspace: the Gauss rule is exact.
                radau_lower.push(g);
                radau_upper.push(None);
            }
            Some(beta) => {
                let lo = radau_estimate(&tri, beta, envelope.lambda_min_floor, state.z_norm2())?;
                let hi = radau_estimate(&tri, beta, envelope.lambda_max_ceiling, state.z_norm2())?;
                radau_lower.push(lo);
                radau_upper.push(Some(hi));
            }
        }
    }
    let lower = radau_lower.iter().sum::<f64>() / s as f64;
    let upper = gauss
        .iter()
        .zip(radau_upper.iter())
        .map(|(g, up)| up.map_or(*g, |u| u.min(*g)))
        .sum::<f64>()
        / s as f64;
    Ok(LogdetBracket { gauss, radau_lower, radau_upper, lower, upper, probes: s })
}
