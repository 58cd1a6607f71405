//! Matérn-3/2 covariance with one lengthscale per input dimension, the
//! positivity-preserving parameter transform used by the optimizer, analytic
//! kernel-matrix derivatives, and the exact log-marginal-likelihood oracle
//! computed by dense Cholesky factorization.
//!
//! The constant mean is handled by centering: every consumer works on the
//! residual targets `y - μ₀1`, keeping the likelihood in mean-zero form.

use nalgebra::{DMatrix, DVector};

use crate::linalg::{cholesky, LinalgError, SymmetricMatrix};

/// Lower bound enforced on every constrained-positive parameter.
pub const PARAM_FLOOR: f64 = 1e-6;

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Kernel and likelihood hyperparameters in their natural (constrained)
/// parameterization. All variance and lengthscale parameters are kept at or
/// above [`PARAM_FLOOR`]; the constant mean is unconstrained.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparameters {
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
    pub mean: f64,
}

impl Hyperparameters {
    /// Standard initialization: unit lengthscales and variances, zero mean.
    /// Intended to be applied after data normalization.
    pub fn init(dims: usize) -> Self {
        Self {
            lengthscales: vec![1.0; dims],
            signal_variance: 1.0,
            noise_variance: 1.0,
            mean: 0.0,
        }
    }

    pub fn dims(&self) -> usize {
        self.lengthscales.len()
    }

    /// Number of optimizable coordinates: D lengthscales, two variances, mean.
    pub fn n_coords(&self) -> usize {
        self.dims() + 3
    }

    pub fn validate(&self) -> Result<(), String> {
        let all = self
            .lengthscales
            .iter()
            .chain([&self.signal_variance, &self.noise_variance]);
        for (i, &v) in all.enumerate() {
            if !v.is_finite() || v < PARAM_FLOOR {
                return Err(format!("constrained parameter {i} is {v}, below floor {PARAM_FLOOR}"));
            }
        }
        if !self.mean.is_finite() {
            return Err("constant mean is not finite".to_string());
        }
        Ok(())
    }

    pub fn to_unconstrained(&self) -> UnconstrainedParams {
        let mut coords = Vec::with_capacity(self.n_coords());
        coords.extend(self.lengthscales.iter().map(|&l| softplus_inv(l - PARAM_FLOOR)));
        coords.push(softplus_inv(self.signal_variance - PARAM_FLOOR));
        coords.push(softplus_inv(self.noise_variance - PARAM_FLOOR));
        coords.push(self.mean);
        UnconstrainedParams { coords }
    }

    /// `d(constrained)/d(unconstrained)` for each coordinate, evaluated at the
    /// current values. The mean uses the identity transform.
    pub fn transform_slopes(&self) -> Vec<f64> {
        let mut slopes: Vec<f64> = self
            .lengthscales
            .iter()
            .chain([&self.signal_variance, &self.noise_variance])
            .map(|&c| softplus_slope(c))
            .collect();
        slopes.push(1.0);
        slopes
    }

    /// Centered targets `y - μ₀1`.
    pub fn center(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| v - self.mean)
    }
}

/// Optimizer coordinates: the bijective image of [`Hyperparameters`] under a
/// shifted softplus, laid out as `[ℓ₁..ℓ_D, σ_f², σ², μ₀]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnconstrainedParams {
    pub coords: Vec<f64>,
}

impl UnconstrainedParams {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn to_hyperparameters(&self) -> Hyperparameters {
        let d = self.coords.len() - 3;
        Hyperparameters {
            lengthscales: self.coords[..d].iter().map(|&u| PARAM_FLOOR + softplus(u)).collect(),
            signal_variance: PARAM_FLOOR + softplus(self.coords[d]),
            noise_variance: PARAM_FLOOR + softplus(self.coords[d + 1]),
            mean: self.coords[d + 2],
        }
    }
}

/// Overflow-safe `log(1 + eˣ)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`]: `log(eʸ - 1)` for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    assert!(y > 0.0, "softplus_inv requires a positive argument");
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

/// Slope of the shifted-softplus transform expressed through the constrained
/// value: `sigmoid(softplus_inv(c - floor)) = 1 - exp(-(c - floor))`.
fn softplus_slope(constrained: f64) -> f64 {
    -(-(constrained - PARAM_FLOOR)).exp_m1()
}

/// Scaled distance `√(Σ_d ((x_d - x'_d)/ℓ_d)²)`.
fn scaled_distance(x: &[f64], x2: &[f64], lengthscales: &[f64]) -> f64 {
    x.iter()
        .zip(x2)
        .zip(lengthscales)
        .map(|((&a, &b), &l)| {
            let t = (a - b) / l;
            t * t
        })
        .sum::<f64>()
        .sqrt()
}

/// Matérn-3/2 covariance `σ_f² (1 + √3 d) exp(-√3 d)` with per-dimension
/// lengthscales folded into the distance `d`.
pub fn matern32(x: &[f64], x2: &[f64], lengthscales: &[f64], signal_variance: f64) -> f64 {
    assert_eq!(x.len(), x2.len());
    assert_eq!(x.len(), lengthscales.len());
    let d = scaled_distance(x, x2, lengthscales);
    signal_variance * (1.0 + SQRT3 * d) * (-SQRT3 * d).exp()
}

fn row(x: &DMatrix<f64>, i: usize) -> Vec<f64> {
    x.row(i).iter().copied().collect()
}

/// Noise-free kernel matrix `K_f` with `[K_f]_{ij} = k(x_i, x_j)`.
pub fn kernel_matrix_noise_free(x: &DMatrix<f64>, hp: &Hyperparameters) -> SymmetricMatrix {
    let n = x.nrows();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| row(x, i)).collect();
    SymmetricMatrix::from_fn_lower(n, |i, j| {
        matern32(&rows[i], &rows[j], &hp.lengthscales, hp.signal_variance)
    })
}

/// Full kernel matrix `K = K_f + σ²I`.
pub fn kernel_matrix(x: &DMatrix<f64>, hp: &Hyperparameters) -> SymmetricMatrix {
    kernel_matrix_noise_free(x, hp).add_diagonal(hp.noise_variance)
}

/// Cross-covariance between two input sets (no noise term).
pub fn cross_kernel(x1: &DMatrix<f64>, x2: &DMatrix<f64>, hp: &Hyperparameters) -> DMatrix<f64> {
    let rows1: Vec<Vec<f64>> = (0..x1.nrows()).map(|i| row(x1, i)).collect();
    let rows2: Vec<Vec<f64>> = (0..x2.nrows()).map(|i| row(x2, i)).collect();
    DMatrix::from_fn(x1.nrows(), x2.nrows(), |i, j| {
        matern32(&rows1[i], &rows2[j], &hp.lengthscales, hp.signal_variance)
    })
}

/// Derivatives of the kernel matrix with respect to the unconstrained
/// coordinates that enter it: `[ℓ₁..ℓ_D, σ_f², σ²]`. The mean coordinate does
/// not appear in `K`, so it carries no matrix here; gradient assembly handles
/// it through the centered targets.
#[derive(Debug, Clone)]
pub struct KernelDerivatives {
    pub matrices: Vec<SymmetricMatrix>,
}

impl KernelDerivatives {
    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }
}

pub fn kernel_derivatives(x: &DMatrix<f64>, hp: &Hyperparameters) -> KernelDerivatives {
    let n = x.nrows();
    let d = hp.dims();
    let slopes = hp.transform_slopes();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| row(x, i)).collect();

    let mut matrices = Vec::with_capacity(d + 2);
    for dim in 0..d {
        let slope = slopes[dim];
        let l = hp.lengthscales[dim];
        matrices.push(SymmetricMatrix::from_fn_lower(n, |i, j| {
            let dist = scaled_distance(&rows[i], &rows[j], &hp.lengthscales);
            let delta = rows[i][dim] - rows[j][dim];
            // ∂k/∂ℓ = 3 σ_f² (Δ²/ℓ³) e^{-√3 d}; the 1/d factors cancel, so the
            // coincident-point case needs no special handling.
            slope * 3.0 * hp.signal_variance * delta * delta / (l * l * l) * (-SQRT3 * dist).exp()
        }));
    }
    let signal_slope = slopes[d];
    matrices.push(SymmetricMatrix::from_fn_lower(n, |i, j| {
        let dist = scaled_distance(&rows[i], &rows[j], &hp.lengthscales);
        signal_slope * (1.0 + SQRT3 * dist) * (-SQRT3 * dist).exp()
    }));
    let noise_slope = slopes[d + 1];
    matrices.push(SymmetricMatrix::from_fn_lower(n, |i, j| {
        if i == j {
            noise_slope
        } else {
            0.0
        }
    }));
    KernelDerivatives { matrices }
}

/// Exact log marginal likelihood
/// `-(n/2) log 2π - ½ log det K - ½ (y-μ₀1)ᵀ K⁻¹ (y-μ₀1)`
/// computed via Cholesky factorization.
pub fn exact_lml(x: &DMatrix<f64>, y: &DVector<f64>, hp: &Hyperparameters) -> Result<f64, LinalgError> {
    let n = x.nrows();
    let k = kernel_matrix(x, hp);
    let factor = cholesky(&k)?;
    let centered = hp.center(y);
    let alpha = factor.solve(&centered);
    Ok(-0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
        - 0.5 * factor.log_det()
        - 0.5 * centered.dot(&alpha))
}

/// Analytic gradient of [`exact_lml`] with respect to the unconstrained
/// coordinates: `½ αᵀ K̇ α - ½ tr(K⁻¹ K̇)` per kernel coordinate with
/// `α = K⁻¹(y-μ₀1)`, and `1ᵀα` for the mean.
pub fn exact_lml_grad(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    hp: &Hyperparameters,
) -> Result<DVector<f64>, LinalgError> {
    let n = x.nrows();
    let k = kernel_matrix(x, hp);
    let factor = cholesky(&k)?;
    let inv = factor.inverse();
    let centered = hp.center(y);
    let alpha = factor.solve(&centered);
    let derivs = kernel_derivatives(x, hp);

    let mut grad = Vec::with_capacity(hp.n_coords());
    for kd in &derivs.matrices {
        let ka = kd.matvec(&alpha);
        let quad = alpha.dot(&ka);
        let mut trace = 0.0;
        for i in 0..n {
            for j in 0..n {
                trace += inv.get(i, j) * kd.get(j, i);
            }
        }
        grad.push(0.5 * quad - 0.5 * trace);
    }
    grad.push(alpha.sum());
    Ok(DVector::from_vec(grad))
}
