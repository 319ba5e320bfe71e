//! Patch preprocessing: contextual mean removal, regularized symmetric
//! whitening, the inverse map used for visualization, and L2 normalization.
//!
//! The whitening operator is `(lambda I + Sigma)^(-1/2)` where `Sigma` is the
//! second moment of mean-removed patches and `lambda` is parameterized
//! relative to `trace(Sigma)/dim` so it carries across datasets.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::dataset::PatchGrid;
use crate::error::{Result, SmtError};
use crate::linalg::eigh;

pub const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct WhiteningOperator {
    /// `(lambda I + Sigma)^(-1/2)`, symmetric positive definite.
    pub forward: Array2<f64>,
    /// `(lambda I + Sigma)^(1/2)`, the exact inverse of `forward`.
    pub inverse: Array2<f64>,
    pub lambda: f64,
    pub dim: usize,
}

/// Mean over the grid neighborhood with Chebyshev radius `radius` (the patch
/// itself included). Returns one mean vector per grid cell, same layout as
/// `grid.patches`.
pub fn contextual_mean(grid: &PatchGrid, radius: usize) -> Result<Array2<f64>> {
    if grid.is_empty() {
        return Err(SmtError::InvalidArgument("empty patch grid".into()));
    }
    let (rows, cols, dim) = (grid.grid_rows, grid.grid_cols, grid.patch_dim());
    // 2D prefix sums over the grid, vectorized across the patch dimension.
    let mut prefix = Array2::<f64>::zeros(((rows + 1) * (cols + 1), dim));
    let pid = |i: usize, j: usize| i * (cols + 1) + j;
    for i in 0..rows {
        for j in 0..cols {
            let cell = grid.patches.row(grid.index(i, j));
            // P[i+1][j+1] = cell + P[i][j+1] + P[i+1][j] - P[i][j]
            let (a, b, c) = (pid(i, j + 1), pid(i + 1, j), pid(i, j));
            let mut out = Array1::zeros(dim);
            for k in 0..dim {
                out[k] = cell[k] + prefix[[a, k]] + prefix[[b, k]] - prefix[[c, k]];
            }
            prefix.row_mut(pid(i + 1, j + 1)).assign(&out);
        }
    }
    let mut means = Array2::zeros((rows * cols, dim));
    for i in 0..rows {
        for j in 0..cols {
            let i0 = i.saturating_sub(radius);
            let j0 = j.saturating_sub(radius);
            let i1 = (i + radius).min(rows - 1);
            let j1 = (j + radius).min(cols - 1);
            let count = ((i1 - i0 + 1) * (j1 - j0 + 1)) as f64;
            let (p11, p01, p10, p00) = (
                pid(i1 + 1, j1 + 1),
                pid(i0, j1 + 1),
                pid(i1 + 1, j0),
                pid(i0, j0),
            );
            let mut out = means.row_mut(grid.index(i, j));
            for k in 0..dim {
                out[k] = (prefix[[p11, k]] - prefix[[p01, k]] - prefix[[p10, k]]
                    + prefix[[p00, k]])
                    / count;
            }
        }
    }
    Ok(means)
}

/// Fit the whitening operator on mean-removed patch vectors (one per row).
/// `lambda = lambda_rel * trace(Sigma) / dim`.
pub fn fit_whitening(samples: ArrayView2<'_, f64>, lambda_rel: f64) -> Result<WhiteningOperator> {
    let (n, dim) = samples.dim();
    if n < 2 || dim == 0 {
        return Err(SmtError::InvalidArgument(format!(
            "whitening fit needs at least 2 samples, got {n}"
        )));
    }
    // Second moment about the origin: the inputs are already mean-removed.
    let moment = samples.t().dot(&samples);
    fit_whitening_from_moment(&moment, n, lambda_rel)
}

/// Fit from an unnormalized second-moment matrix `sum x x^T` over `n`
/// samples; streaming accumulation paths land here.
pub fn fit_whitening_from_moment(
    moment: &Array2<f64>,
    n: usize,
    lambda_rel: f64,
) -> Result<WhiteningOperator> {
    let dim = moment.nrows();
    if moment.ncols() != dim || dim == 0 {
        return Err(SmtError::InvalidArgument(format!(
            "moment matrix must be square, got {:?}",
            moment.dim()
        )));
    }
    if n < 2 {
        return Err(SmtError::InvalidArgument(format!(
            "whitening fit needs at least 2 samples, got {n}"
        )));
    }
    if lambda_rel < 0.0 {
        return Err(SmtError::InvalidArgument("lambda_rel must be nonnegative".into()));
    }
    let sigma = moment / n as f64;
    let lambda = lambda_rel * sigma.diag().sum() / dim as f64;
    let mut reg = sigma;
    for i in 0..dim {
        reg[[i, i]] += lambda;
    }
    let (vals, vecs) = eigh(reg.view())?;
    if vals[0] <= 0.0 || !vals[0].is_finite() {
        return Err(SmtError::Numeric(format!(
            "singular covariance: smallest regularized eigenvalue {} (need more samples or lambda_rel > 0)",
            vals[0]
        )));
    }
    let mut inv_sqrt = Array2::zeros((dim, dim));
    let mut sqrt = Array2::zeros((dim, dim));
    for (k, &v) in vals.iter().enumerate() {
        let col = vecs.column(k);
        let (wi, ws) = (v.powf(-0.5), v.sqrt());
        for i in 0..dim {
            for j in 0..=i {
                let outer = col[i] * col[j];
                inv_sqrt[[i, j]] += wi * outer;
                sqrt[[i, j]] += ws * outer;
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            inv_sqrt[[j, i]] = inv_sqrt[[i, j]];
            sqrt[[j, i]] = sqrt[[i, j]];
        }
    }
    Ok(WhiteningOperator {
        forward: inv_sqrt,
        inverse: sqrt,
        lambda,
        dim,
    })
}

impl WhiteningOperator {
    /// `forward * (patch - mean)`.
    pub fn whiten(&self, patch: ArrayView1<'_, f64>, mean: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if patch.len() != self.dim || mean.len() != self.dim {
            return Err(SmtError::InvalidArgument(format!(
                "whiten: got vectors of length {}/{}, operator dim {}",
                patch.len(),
                mean.len(),
                self.dim
            )));
        }
        let centered = &patch - &mean;
        Ok(self.forward.dot(&centered))
    }

    /// Whiten a batch of rows with per-row means.
    pub fn whiten_batch(
        &self,
        patches: ArrayView2<'_, f64>,
        means: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        if patches.dim() != means.dim() || patches.ncols() != self.dim {
            return Err(SmtError::InvalidArgument(format!(
                "whiten_batch: shapes {:?} vs {:?}, operator dim {}",
                patches.dim(),
                means.dim(),
                self.dim
            )));
        }
        let centered = &patches - &means;
        // forward is symmetric, so (forward X^T)^T = X forward
        Ok(centered.dot(&self.forward))
    }

    /// Map a whitened vector back to (mean-removed) patch space.
    pub fn unwhiten(&self, v: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if v.len() != self.dim {
            return Err(SmtError::InvalidArgument(format!(
                "unwhiten: vector length {} vs operator dim {}",
                v.len(),
                self.dim
            )));
        }
        Ok(self.inverse.dot(&v))
    }
}

/// `v / ||v||`, or the zero vector when `||v|| <= eps` (flat patches are legal
/// inputs and must not error).
pub fn l2_normalize(v: ArrayView1<'_, f64>) -> Array1<f64> {
    let norm = v.dot(&v).sqrt();
    if norm <= NORMALIZE_EPS {
        Array1::zeros(v.len())
    } else {
        v.mapv(|x| x / norm)
    }
}

/// In-place row-wise variant; returns per-row flags for nonzero rows.
pub fn l2_normalize_rows(m: &mut Array2<f64>) -> Vec<bool> {
    let mut nonzero = Vec::with_capacity(m.nrows());
    for mut row in m.axis_iter_mut(Axis(0)) {
        let norm = row.dot(&row).sqrt();
        if norm <= NORMALIZE_EPS {
            row.fill(0.0);
            nonzero.push(false);
        } else {
            row.mapv_inplace(|x| x / norm);
            nonzero.push(true);
        }
    }
    nonzero
}
