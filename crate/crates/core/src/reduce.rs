//! Principal component analysis over explanation or raw vectors.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::matrix::Matrix;

/// Percentile used by the saliency outlier guard.
pub const WINSORIZE_PERCENTILE: f64 = 99.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f32>,
    /// `k x D`, rows are the principal axes.
    pub components: Matrix,
    pub explained_variance: Vec<f32>,
    pub explained_variance_ratio: Vec<f32>,
}

impl PcaModel {
    pub fn k(&self) -> usize {
        self.components.rows()
    }

    pub fn dims(&self) -> usize {
        self.components.cols()
    }
}

/// Fits `k` principal axes to the rows of `x`.
///
/// Covariance uses `N - 1` normalization. Each axis is oriented so that its
/// largest-magnitude coordinate is positive.
pub fn fit_pca(x: &Matrix, k: usize) -> Result<PcaModel> {
    let (n, d) = (x.rows(), x.cols());
    if n < 2 {
        return Err(Error::invalid(format!("PCA needs at least 2 rows, got {n}")));
    }
    if k == 0 || k > d || k > n - 1 {
        return Err(Error::invalid(format!(
            "PCA k={k} out of range 1..={} for {n}x{d} data",
            d.min(n - 1)
        )));
    }
    if let Some(i) = x.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            stage: "PCA input".into(),
            index: i,
        });
    }

    let mut mean = vec![0.0f64; d];
    for row in x.iter_rows() {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let centered = DMatrix::from_fn(n, d, |i, j| x.get(i, j) as f64 - mean[j]);
    let cov = (centered.transpose() * &centered) / (n - 1) as f64;
    let total: f64 = cov.diagonal().iter().sum();
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
            .then(a.cmp(&b))
    });

    let mut components = Matrix::zeros(k, d);
    let mut variance = Vec::with_capacity(k);
    let mut ratio = Vec::with_capacity(k);
    for (r, &c) in order.iter().take(k).enumerate() {
        let axis = eig.eigenvectors.column(c);
        let mut pivot = 0;
        for j in 1..d {
            if axis[j].abs() > axis[pivot].abs() {
                pivot = j;
            }
        }
        let sign = if axis[pivot] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            components.set(r, j, (sign * axis[j]) as f32);
        }
        let lambda = eig.eigenvalues[c].max(0.0);
        variance.push(lambda as f32);
        ratio.push(if total > 0.0 { (lambda / total) as f32 } else { 0.0 });
    }

    Ok(PcaModel {
        mean: mean.into_iter().map(|m| m as f32).collect(),
        components,
        explained_variance: variance,
        explained_variance_ratio: ratio,
    })
}

/// `components · (x_i - mean)` for every row.
pub fn project(pca: &PcaModel, x: &Matrix) -> Result<Matrix> {
    check_dim(pca.dims(), x.cols())?;
    let k = pca.k();
    let mut out = Matrix::zeros(x.rows(), k);
    let mut centered = vec![0.0f64; x.cols()];
    for (i, row) in x.iter_rows().enumerate() {
        for ((c, &v), &m) in centered.iter_mut().zip(row).zip(&pca.mean) {
            *c = v as f64 - m as f64;
        }
        for r in 0..k {
            let s: f64 = pca
                .components
                .row(r)
                .iter()
                .zip(&centered)
                .map(|(&a, &b)| a as f64 * b)
                .sum();
            out.set(i, r, s as f32);
        }
    }
    Ok(out)
}

/// Maps projected rows back to feature space: `mean + Σ_r y_r c_r`.
pub fn reconstruct(pca: &PcaModel, y: &Matrix) -> Result<Matrix> {
    check_dim(pca.k(), y.cols())?;
    let d = pca.dims();
    let mut out = Matrix::zeros(y.rows(), d);
    for i in 0..y.rows() {
        let mut acc: Vec<f64> = pca.mean.iter().map(|&m| m as f64).collect();
        for (r, &coef) in y.row(i).iter().enumerate() {
            for (a, &c) in acc.iter_mut().zip(pca.components.row(r)) {
                *a += coef as f64 * c as f64;
            }
        }
        for (o, a) in out.row_mut(i).iter_mut().zip(acc) {
            *o = a as f32;
        }
    }
    Ok(out)
}

/// Clips every entry to ±(the `percentile`-th percentile of |entries|).
pub fn winsorize(x: &Matrix, percentile: f64) -> Matrix {
    let limit = abs_percentile(x.as_slice(), percentile);
    match limit {
        Some(limit) => x.map(|v| v.clamp(-limit, limit)),
        None => x.clone(),
    }
}

/// Nearest-rank percentile of the absolute values.
pub fn abs_percentile(values: &[f32], percentile: f64) -> Option<f32> {
    if values.is_empty() {
        return None;
    }
    let mut abs: Vec<f32> = values.iter().map(|v| v.abs()).collect();
    let rank = ((percentile / 100.0) * abs.len() as f64).ceil() as usize;
    let idx = rank.clamp(1, abs.len()) - 1;
    let (_, nth, _) = abs.select_nth_unstable_by(idx, |a, b| a.total_cmp(b));
    Some(*nth)
}
