//! Dense symmetric linear algebra: Cholesky factorization, symmetric and
//! tridiagonal eigensolvers, greedy pivoted low-rank factorization, and the
//! Woodbury identity for low-rank-plus-diagonal solves.
//!
//! Everything here operates on plain `f64` dense storage; kernel matrices at
//! this scale are dense and small enough that blocked or sparse formats buy
//! nothing. All values are immutable after construction and safe to share
//! across threads.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Relative symmetry tolerance accepted on construction.
const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot} is {value:.3e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("eigensolver failed to converge within {sweeps} sweeps for eigenvalue {index}")]
    NoConvergence { index: usize, sweeps: usize },
    #[error("matrix entry ({row},{col}) is not finite")]
    NonFinite { row: usize, col: usize },
    #[error("matrix is not symmetric: |A - Aᵀ| exceeds tolerance at ({row},{col})")]
    NotSymmetric { row: usize, col: usize },
    #[error("matrix logarithm undefined: eigenvalue {index} is {value:.3e}")]
    NonPositiveEigenvalue { index: usize, value: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// A real symmetric matrix. Construction validates finiteness and symmetry
/// (within `1e-12` relative) and stores the symmetrized form `(A + Aᵀ)/2`,
/// which guards against accumulation noise in kernel assembly.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix {
    mat: DMatrix<f64>,
}

impl SymmetricMatrix {
    pub fn new(mat: DMatrix<f64>) -> Result<Self, LinalgError> {
        assert_eq!(mat.nrows(), mat.ncols(), "symmetric matrix must be square");
        let n = mat.nrows();
        let mut max_abs = 0.0f64;
        for j in 0..n {
            for i in 0..n {
                let v = mat[(i, j)];
                if !v.is_finite() {
                    return Err(LinalgError::NonFinite { row: i, col: j });
                }
                max_abs = max_abs.max(v.abs());
            }
        }
        for j in 0..n {
            for i in (j + 1)..n {
                if (mat[(i, j)] - mat[(j, i)]).abs() > SYMMETRY_TOL * max_abs {
                    return Err(LinalgError::NotSymmetric { row: i, col: j });
                }
            }
        }
        let mut sym = mat;
        for j in 0..n {
            for i in (j + 1)..n {
                let v = 0.5 * (sym[(i, j)] + sym[(j, i)]);
                sym[(i, j)] = v;
                sym[(j, i)] = v;
            }
        }
        Ok(Self { mat: sym })
    }

    /// Builds the matrix from entries of the lower triangle (`f(i, j)` with
    /// `i >= j`), mirroring them so symmetry is exact by construction.
    pub fn from_fn_lower(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut mat = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in j..n {
                let v = f(i, j);
                mat[(i, j)] = v;
                mat[(j, i)] = v;
            }
        }
        Self { mat }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            mat: DMatrix::identity(n, n),
        }
    }

    pub fn n(&self) -> usize {
        self.mat.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.mat[(i, j)]
    }

    pub fn as_dmatrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn matvec(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.mat * x
    }

    /// Largest diagonal entry; scale proxy for breakdown thresholds.
    pub fn diag_max(&self) -> f64 {
        (0..self.n()).fold(f64::NEG_INFINITY, |m, i| m.max(self.mat[(i, i)]))
    }

    /// Adds `shift` to the diagonal.
    pub fn add_diagonal(&self, shift: f64) -> Self {
        let mut mat = self.mat.clone();
        for i in 0..self.n() {
            mat[(i, i)] += shift;
        }
        Self { mat }
    }
}

/// A symmetric tridiagonal matrix stored as its diagonal and off-diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct TridiagonalMatrix {
    diag: Vec<f64>,
    off: Vec<f64>,
}

impl TridiagonalMatrix {
    pub fn new(diag: Vec<f64>, off: Vec<f64>) -> Self {
        assert!(
            !diag.is_empty() && off.len() + 1 == diag.len(),
            "off-diagonal must be one shorter than diagonal"
        );
        Self { diag, off }
    }

    pub fn order(&self) -> usize {
        self.diag.len()
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn off(&self) -> &[f64] {
        &self.off
    }

    pub fn to_dense(&self) -> SymmetricMatrix {
        let t = self.order();
        SymmetricMatrix::from_fn_lower(t, |i, j| {
            if i == j {
                self.diag[i]
            } else if i == j + 1 {
                self.off[j]
            } else {
                0.0
            }
        })
    }
}

/// Eigendecomposition `A = Q Λ Qᵀ` with eigenvalues ascending and orthonormal
/// eigenvector columns.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

impl EigenDecomposition {
    /// Applies `f` to the spectrum: returns `Q f(Λ) Qᵀ`.
    pub fn map_spectrum(&self, f: impl Fn(f64) -> f64) -> SymmetricMatrix {
        let m = self.values.len();
        let q = &self.vectors;
        SymmetricMatrix::from_fn_lower(m, |i, j| {
            (0..m).map(|k| q[(i, k)] * f(self.values[k]) * q[(j, k)]).sum()
        })
    }
}

/// Lower-triangular Cholesky factor `L` with `LLᵀ = A`. Stored row-major so
/// the inner products of the factorization and solves scan contiguously.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    n: usize,
    rows: Vec<f64>,
}

/// Dense Cholesky factorization of a symmetric positive definite matrix.
///
/// Fails with [`LinalgError::NotPositiveDefinite`] naming the first
/// nonpositive pivot.
pub fn cholesky(a: &SymmetricMatrix) -> Result<CholeskyFactor, LinalgError> {
    let n = a.n();
    let mut rows = vec![0.0f64; n * n];
    for j in 0..n {
        let mut diag = a.get(j, j);
        for k in 0..j {
            diag -= rows[j * n + k] * rows[j * n + k];
        }
        if diag <= 0.0 || !diag.is_finite() {
            return Err(LinalgError::NotPositiveDefinite { pivot: j, value: diag });
        }
        let ljj = diag.sqrt();
        rows[j * n + j] = ljj;
        for i in (j + 1)..n {
            let mut s = a.get(i, j);
            let (ri, rj) = (i * n, j * n);
            for k in 0..j {
                s -= rows[ri + k] * rows[rj + k];
            }
            rows[ri + j] = s / ljj;
        }
    }
    Ok(CholeskyFactor { n, rows })
}

impl CholeskyFactor {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i * self.n + j]
    }

    /// Solves `A x = b` by forward and backward substitution.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        assert_eq!(b.len(), n);
        let mut x = vec![0.0f64; n];
        for i in 0..n {
            let mut s = b[i];
            let ri = i * n;
            for k in 0..i {
                s -= self.rows[ri + k] * x[k];
            }
            x[i] = s / self.rows[ri + i];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self.rows[k * n + i] * x[k];
            }
            x[i] = s / self.rows[i * n + i];
        }
        DVector::from_vec(x)
    }

    /// `log det A = 2 Σ log L_ii`.
    pub fn log_det(&self) -> f64 {
        (0..self.n).map(|i| 2.0 * self.rows[i * self.n + i].ln()).sum()
    }

    /// Explicit inverse `A⁻¹ = L⁻ᵀ L⁻¹`.
    pub fn inverse(&self) -> SymmetricMatrix {
        let n = self.n;
        // W = L⁻¹, lower triangular, computed column by column.
        let mut w = vec![0.0f64; n * n];
        for j in 0..n {
            w[j * n + j] = 1.0 / self.rows[j * n + j];
            for i in (j + 1)..n {
                let mut s = 0.0;
                for k in j..i {
                    s -= self.rows[i * n + k] * w[k * n + j];
                }
                w[i * n + j] = s / self.rows[i * n + i];
            }
        }
        SymmetricMatrix::from_fn_lower(n, |i, j| {
            // (WᵀW)_{ij} over rows k ≥ max(i, j) of W.
            (i.max(j)..n).map(|k| w[k * n + i] * w[k * n + j]).sum()
        })
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| {
            if i >= j {
                self.rows[i * self.n + j]
            } else {
                0.0
            }
        })
    }
}

const QL_MAX_SWEEPS: usize = 30;

/// Implicit-shift QL iteration on a tridiagonal matrix, accumulating the
/// applied rotations into the rows of `z` (columns of the eigenvector matrix
/// are mixed). `d` holds the diagonal, `e` the off-diagonal in `e[0..n-1]`
/// with `e[n-1]` used as scratch. On return `d` holds unsorted eigenvalues.
fn ql_implicit_shift(d: &mut [f64], e: &mut [f64], z: &mut DMatrix<f64>) -> Result<(), LinalgError> {
    let n = d.len();
    let rows = z.nrows();
    if n == 1 {
        return Ok(());
    }
    e[n - 1] = 0.0;
    for l in 0..n {
        let mut iter = 0usize;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > QL_MAX_SWEEPS {
                return Err(LinalgError::NoConvergence { index: l, sweeps: QL_MAX_SWEEPS });
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c) = (1.0f64, 1.0f64);
            let mut p = 0.0f64;
            let mut underflow = false;
            for i in (l..m).rev() {
                let mut f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    // Rotation underflow: deflate and retry this eigenvalue.
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                for k in 0..rows {
                    f = z[(k, i + 1)];
                    z[(k, i + 1)] = s * z[(k, i)] + c * f;
                    z[(k, i)] = c * z[(k, i)] - s * f;
                }
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}

/// Sorts eigenvalues ascending, permuting the accumulated columns of `z`.
fn sort_eigen(d: &mut [f64], z: &mut DMatrix<f64>) {
    let n = d.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[a].partial_cmp(&d[b]).expect("eigenvalues are finite"));
    let sorted_d: Vec<f64> = order.iter().map(|&i| d[i]).collect();
    d.copy_from_slice(&sorted_d);
    let old = z.clone();
    for (new_col, &old_col) in order.iter().enumerate() {
        z.set_column(new_col, &old.column(old_col));
    }
}

/// Eigendecomposition of a symmetric tridiagonal matrix via implicit-shift QL
/// with a budget of 30 sweeps per eigenvalue.
pub fn tridiag_eigen(t: &TridiagonalMatrix) -> Result<EigenDecomposition, LinalgError> {
    let n = t.order();
    let mut d = t.diag().to_vec();
    let mut e = vec![0.0f64; n];
    e[..n - 1].copy_from_slice(t.off());
    let mut z = DMatrix::identity(n, n);
    ql_implicit_shift(&mut d, &mut e, &mut z)?;
    sort_eigen(&mut d, &mut z);
    Ok(EigenDecomposition { values: d, vectors: z })
}

/// Eigenvalues of a symmetric tridiagonal matrix together with the first
/// component of each eigenvector. This is all a Gauss quadrature rule needs,
/// and tracking a single row of the rotation product costs O(t²) rather than
/// the O(t³) of the full decomposition.
pub fn tridiag_eigen_weights(t: &TridiagonalMatrix) -> Result<(Vec<f64>, Vec<f64>), LinalgError> {
    let n = t.order();
    let mut d = t.diag().to_vec();
    let mut e = vec![0.0f64; n];
    e[..n - 1].copy_from_slice(t.off());
    let mut z = DMatrix::zeros(1, n);
    z[(0, 0)] = 1.0;
    ql_implicit_shift(&mut d, &mut e, &mut z)?;
    sort_eigen(&mut d, &mut z);
    let first_components: Vec<f64> = (0..n).map(|j| z[(0, j)]).collect();
    Ok((d, first_components))
}

/// Eigendecomposition of a dense symmetric matrix: Householder reduction to
/// tridiagonal form with accumulated transformations, then implicit-shift QL.
pub fn sym_eigen(a: &SymmetricMatrix) -> Result<EigenDecomposition, LinalgError> {
    let n = a.n();
    let mut z = a.as_dmatrix().clone();
    let mut d = vec![0.0f64; n];
    let mut e = vec![0.0f64; n];
    householder_tridiagonalize(&mut z, &mut d, &mut e);
    // Shift couplings so e[i] joins d[i] and d[i+1].
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    ql_implicit_shift(&mut d, &mut e, &mut z)?;
    sort_eigen(&mut d, &mut z);
    Ok(EigenDecomposition { values: d, vectors: z })
}

/// Householder reduction of a symmetric matrix to tridiagonal form. On return
/// `d` is the diagonal, `e[1..]` the subdiagonal (`e[i]` joins rows `i-1` and
/// `i`), and `a` holds the accumulated orthogonal transformation.
fn householder_tridiagonalize(a: &mut DMatrix<f64>, d: &mut [f64], e: &mut [f64]) {
    let n = a.nrows();
    if n == 1 {
        d[0] = a[(0, 0)];
        e[0] = 0.0;
        a[(0, 0)] = 1.0;
        return;
    }
    for i in (1..n).rev() {
        let l = i - 1;
        let mut h = 0.0f64;
        if l > 0 {
            let mut scale = 0.0f64;
            for k in 0..=l {
                scale += a[(i, k)].abs();
            }
            if scale == 0.0 {
                e[i] = a[(i, l)];
            } else {
                for k in 0..=l {
                    a[(i, k)] /= scale;
                    h += a[(i, k)] * a[(i, k)];
                }
                let f = a[(i, l)];
                let g = if f >= 0.0 { -h.sqrt() } else { h.sqrt() };
                e[i] = scale * g;
                h -= f * g;
                a[(i, l)] = f - g;
                let mut f_acc = 0.0f64;
                for j in 0..=l {
                    a[(j, i)] = a[(i, j)] / h;
                    let mut g_acc = 0.0f64;
                    for k in 0..=j {
                        g_acc += a[(j, k)] * a[(i, k)];
                    }
                    for k in (j + 1)..=l {
                        g_acc += a[(k, j)] * a[(i, k)];
                    }
                    e[j] = g_acc / h;
                    f_acc += e[j] * a[(i, j)];
                }
                let hh = f_acc / (h + h);
                for j in 0..=l {
                    let f = a[(i, j)];
                    let g = e[j] - hh * f;
                    e[j] = g;
                    for k in 0..=j {
                        let delta = f * e[k] + g * a[(i, k)];
                        a[(j, k)] -= delta;
                    }
                }
            }
        } else {
            e[i] = a[(i, l)];
        }
        d[i] = h;
    }
    d[0] = 0.0;
    e[0] = 0.0;
    // Accumulate the product of Householder reflections.
    for i in 0..n {
        if d[i] != 0.0 {
            for j in 0..i {
                let mut g = 0.0f64;
                for k in 0..i {
                    g += a[(i, k)] * a[(k, j)];
                }
                for k in 0..i {
                    let delta = g * a[(k, i)];
                    a[(k, j)] -= delta;
                }
            }
        }
        d[i] = a[(i, i)];
        a[(i, i)] = 1.0;
        for j in 0..i {
            a[(j, i)] = 0.0;
            a[(i, j)] = 0.0;
        }
    }
}

/// Matrix logarithm of a symmetric positive definite matrix via
/// eigendecomposition.
pub fn log_matrix(a: &SymmetricMatrix) -> Result<SymmetricMatrix, LinalgError> {
    let eig = sym_eigen(a)?;
    for (i, &v) in eig.values.iter().enumerate() {
        if v <= 0.0 {
            return Err(LinalgError::NonPositiveEigenvalue { index: i, value: v });
        }
    }
    Ok(eig.map_spectrum(f64::ln))
}

/// Partial Cholesky factor `L` (n×p) with the pivot order of its columns.
/// `A - LLᵀ` remains positive semi-definite for PSD input, which is what makes
/// the factor usable as a preconditioner under the noise floor.
#[derive(Debug, Clone)]
pub struct LowRankFactor {
    factor: DMatrix<f64>,
    pivots: Vec<usize>,
}

impl LowRankFactor {
    pub fn empty(n: usize) -> Self {
        Self {
            factor: DMatrix::zeros(n, 0),
            pivots: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.factor.nrows()
    }

    pub fn rank(&self) -> usize {
        self.factor.ncols()
    }

    pub fn pivots(&self) -> &[usize] {
        &self.pivots
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    /// Dense reconstruction `LLᵀ`.
    pub fn reconstruct(&self) -> SymmetricMatrix {
        let n = self.n();
        let l = &self.factor;
        SymmetricMatrix::from_fn_lower(n, |i, j| l.row(i).dot(&l.row(j)))
    }
}

/// Greedy pivoted Cholesky: at each step the largest remaining diagonal
/// residual is eliminated (ties broken by lowest index). Stops at `max_rank`
/// columns or when the largest residual drops to `residual_tol`.
pub fn pivoted_cholesky(a: &SymmetricMatrix, max_rank: usize, residual_tol: f64) -> LowRankFactor {
    let n = a.n();
    let p_max = max_rank.min(n);
    let mut diag: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(p_max);
    let mut pivots: Vec<usize> = Vec::with_capacity(p_max);
    for _ in 0..p_max {
        let mut pivot = 0usize;
        for i in 1..n {
            if diag[i] > diag[pivot] {
                pivot = i;
            }
        }
        if diag[pivot] <= residual_tol || diag[pivot] <= 0.0 {
            break;
        }
        let scale = diag[pivot].sqrt();
        let mut col = DVector::from_fn(n, |i, _| a.get(i, pivot));
        for (c, &pv) in cols.iter().zip(pivots.iter()) {
            let cp = c[pivot];
            col.axpy(-cp, c, 1.0);
            let _ = pv;
        }
        col /= scale;
        for i in 0..n {
            diag[i] -= col[i] * col[i];
        }
        pivots.push(pivot);
        cols.push(col);
    }
    let p = cols.len();
    let mut factor = DMatrix::zeros(n, p);
    for (k, c) in cols.iter().enumerate() {
        factor.set_column(k, c);
    }
    LowRankFactor { factor, pivots }
}

/// Solves `(LLᵀ + σ²I) x = b` through the Woodbury identity with a single
/// p×p inner factorization.
pub fn woodbury_solve(
    low_rank: &LowRankFactor,
    sigma2: f64,
    b: &DVector<f64>,
) -> Result<DVector<f64>, LinalgError> {
    assert!(sigma2 > 0.0, "noise variance must be positive");
    let n = low_rank.n();
    if b.len() != n {
        return Err(LinalgError::DimensionMismatch { expected: n, got: b.len() });
    }
    let p = low_rank.rank();
    if p == 0 {
        return Ok(b / sigma2);
    }
    let l = low_rank.factor();
    let gram = SymmetricMatrix::from_fn_lower(p, |i, j| {
        l.column(i).dot(&l.column(j)) + if i == j { sigma2 } else { 0.0 }
    });
    let inner = cholesky(&gram)?;
    let ltb = l.transpose() * b;
    let c = inner.solve(&ltb);
    Ok((b - l * c) / sigma2)
}
