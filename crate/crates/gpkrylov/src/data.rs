//! Dataset ingestion, normalization, splitting, and synthetic draws from the
//! model itself for generate-and-recover checks.
//!
//! Normalization is z-scoring computed on the training split only; the
//! statistics are stored so predictions and errors can be reported in the
//! original target units.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::kernel::{kernel_matrix, Hyperparameters};
use crate::linalg::{cholesky, LinalgError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse { row: usize, column: usize, message: String },
    #[error("target column {0:?} not found")]
    MissingTarget(String),
    #[error("column {0:?} is constant; cannot normalize")]
    ConstantColumn(String),
    #[error("dataset is empty")]
    Empty,
    #[error("dataset must be split before this operation")]
    NotSplit,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Per-column z-score statistics gathered from the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

/// A regression dataset: inputs, targets, optional split indices and the
/// normalization statistics applied to it. Immutable after construction;
/// transformations return new values.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub feature_names: Vec<String>,
    pub split: Option<Split>,
    pub normalization: Option<Normalization>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn dims(&self) -> usize {
        self.x.ncols()
    }

    fn rows(&self, idx: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
        let d = self.dims();
        let xs = DMatrix::from_fn(idx.len(), d, |i, j| self.x[(idx[i], j)]);
        let ys = DVector::from_fn(idx.len(), |i, _| self.y[idx[i]]);
        (xs, ys)
    }

    pub fn train_rows(&self) -> Result<(DMatrix<f64>, DVector<f64>), DataError> {
        let split = self.split.as_ref().ok_or(DataError::NotSplit)?;
        Ok(self.rows(&split.train))
    }

    pub fn test_rows(&self) -> Result<(DMatrix<f64>, DVector<f64>), DataError> {
        let split = self.split.as_ref().ok_or(DataError::NotSplit)?;
        Ok(self.rows(&split.test))
    }

    /// Maps a normalized target back to original units.
    pub fn denormalize_y(&self, v: f64) -> f64 {
        match &self.normalization {
            Some(stats) => v * stats.y_std + stats.y_mean,
            None => v,
        }
    }
}

/// Loads a CSV file of numeric columns. The target column is selected by
/// header name or by zero-based index (a numeric `target` string is treated
/// as an index when no header matches it). Row order is preserved.
pub fn load_csv(path: &Path, target: &str, has_header: bool) -> Result<Dataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        })?;

    let headers: Vec<String> = if has_header {
        reader
            .headers()
            .map_err(|e| DataError::Parse { row: 0, column: 0, message: e.to_string() })?
            .iter()
            .map(str::to_string)
            .collect()
    } else {
        Vec::new()
    };

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DataError::Parse {
            row: i + 1,
            column: 0,
            message: e.to_string(),
        })?;
        let mut row = Vec::with_capacity(record.len());
        for (j, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| DataError::Parse {
                row: i + 1,
                column: j + 1,
                message: format!("not a number: {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(DataError::Parse {
                    row: i + 1,
                    column: j + 1,
                    message: format!("non-finite value {v}"),
                });
            }
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(DataError::Empty);
    }
    let width = rows[0].len();
    if let Some((i, row)) = rows.iter().enumerate().find(|(_, r)| r.len() != width) {
        return Err(DataError::Parse {
            row: i + 1,
            column: row.len(),
            message: format!("expected {width} fields, found {}", row.len()),
        });
    }

    let target_idx = if let Some(idx) = headers.iter().position(|h| h == target) {
        idx
    } else if let Ok(idx) = target.parse::<usize>() {
        if idx >= width {
            return Err(DataError::MissingTarget(target.to_string()));
        }
        idx
    } else {
        return Err(DataError::MissingTarget(target.to_string()));
    };

    let n = rows.len();
    let d = width - 1;
    let mut x = DMatrix::zeros(n, d);
    let mut y = DVector::zeros(n);
    for (i, row) in rows.iter().enumerate() {
        let mut col = 0;
        for (j, v) in row.iter().enumerate() {
            if j == target_idx {
                y[i] = *v;
            } else {
                x[(i, col)] = *v;
                col += 1;
            }
        }
    }
    let feature_names = if has_header {
        headers
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != target_idx)
            .map(|(_, h)| h.clone())
            .collect()
    } else {
        (0..d).map(|j| format!("x{j}")).collect()
    };
    Ok(Dataset { x, y, feature_names, split: None, normalization: None })
}

/// Splits uniformly at random with the first `⌈2n/3⌉` permuted rows going to
/// the training set. Deterministic for a given seed.
pub fn split(ds: &Dataset, seed: u64) -> Dataset {
    let n = ds.n();
    assert!(n >= 3, "need at least 3 rows to split");
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher–Yates.
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    let n_train = 2 * n / 3 + usize::from(2 * n % 3 != 0);
    let mut out = ds.clone();
    out.split = Some(Split {
        train: perm[..n_train].to_vec(),
        test: perm[n_train..].to_vec(),
        seed,
    });
    out
}

fn column_stats(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let count = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / count;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
    (mean, var.sqrt())
}

/// Z-scores inputs and targets using statistics of the training split only
/// (all rows when the dataset is unsplit). The statistics are stored on the
/// returned dataset for de-normalization.
pub fn normalize(ds: &Dataset) -> Result<Dataset, DataError> {
    let train_idx: Vec<usize> = match &ds.split {
        Some(s) => s.train.clone(),
        None => (0..ds.n()).collect(),
    };
    let d = ds.dims();
    let mut x_mean = Vec::with_capacity(d);
    let mut x_std = Vec::with_capacity(d);
    for j in 0..d {
        let (mean, std) = column_stats(train_idx.iter().map(|&i| ds.x[(i, j)]));
        if std <= 0.0 {
            return Err(DataError::ConstantColumn(
                ds.feature_names.get(j).cloned().unwrap_or_else(|| format!("x{j}")),
            ));
        }
        x_mean.push(mean);
        x_std.push(std);
    }
    let (y_mean, y_std) = column_stats(train_idx.iter().map(|&i| ds.y[i]));
    if y_std <= 0.0 {
        return Err(DataError::ConstantColumn("target".to_string()));
    }
    let mut out = ds.clone();
    out.x = DMatrix::from_fn(ds.n(), d, |i, j| (ds.x[(i, j)] - x_mean[j]) / x_std[j]);
    out.y = DVector::from_fn(ds.n(), |i, _| (ds.y[i] - y_mean) / y_std);
    out.normalization = Some(Normalization { x_mean, x_std, y_mean, y_std });
    Ok(out)
}

/// Applies previously computed statistics (for evaluating held-out data with
/// the exact transformation of a finished run).
pub fn normalize_with(ds: &Dataset, stats: &Normalization) -> Dataset {
    let d = ds.dims();
    let mut out = ds.clone();
    out.x = DMatrix::from_fn(ds.n(), d, |i, j| (ds.x[(i, j)] - stats.x_mean[j]) / stats.x_std[j]);
    out.y = DVector::from_fn(ds.n(), |i, _| (ds.y[i] - stats.y_mean) / stats.y_std);
    out.normalization = Some(stats.clone());
    out
}

/// Permissive alternative to failing on constant features: removes them and
/// reports their names so ingestion can warn instead of aborting.
pub fn drop_constant_columns(ds: &Dataset) -> (Dataset, Vec<String>) {
    let n = ds.n();
    let mut keep = Vec::new();
    let mut dropped = Vec::new();
    for j in 0..ds.dims() {
        let (_, std) = column_stats((0..n).map(|i| ds.x[(i, j)]));
        if std > 0.0 {
            keep.push(j);
        } else {
            dropped.push(ds.feature_names.get(j).cloned().unwrap_or_else(|| format!("x{j}")));
        }
    }
    let mut out = ds.clone();
    out.x = DMatrix::from_fn(n, keep.len(), |i, jj| ds.x[(i, keep[jj])]);
    out.feature_names = keep
        .iter()
        .map(|&j| ds.feature_names.get(j).cloned().unwrap_or_else(|| format!("x{j}")))
        .collect();
    (out, dropped)
}

/// Draws a dataset from the model itself: inputs uniform on `[0,1]^D`,
/// targets `y ~ N(μ₀1, K)` sampled through the Cholesky factor.
pub fn synth_gp(n: usize, d: usize, hp: &Hyperparameters, seed: u64) -> Result<Dataset, DataError> {
    assert!(n >= 1 && n <= 4096, "dense sampling supports 1..=4096 rows");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, d, |_, _| rng.random::<f64>());
    let k = kernel_matrix(&x, hp);
    let factor = cholesky(&k)?;
    let normals = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
    let l = factor.to_dmatrix();
    let y = l * normals + DVector::from_element(n, hp.mean);
    let feature_names = (0..d).map(|j| format!("x{j}")).collect();
    Ok(Dataset { x, y, feature_names, split: None, normalization: None })
}
