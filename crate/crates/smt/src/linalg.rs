//! Dense symmetric eigendecomposition (via faer) and a shifted block Lanczos
//! for the trailing end of the spectrum when the matrix is too large for a
//! full decomposition.

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SmtError};

/// Full eigendecomposition of a symmetric matrix.
/// Returns eigenvalues in ascending order and eigenvectors as columns.
pub fn eigh(a: ArrayView2<'_, f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(SmtError::InvalidArgument(format!(
            "eigh needs a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    if let Some(bad) = a.iter().find(|v| !v.is_finite()) {
        return Err(SmtError::Numeric(format!("non-finite entry {bad} in eigh input")));
    }
    let m = faer::Mat::from_fn(n, n, |i, j| a[[i, j]]);
    let evd = m
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|e| SmtError::Numeric(format!("eigendecomposition failed: {e:?}")))?;
    let mut values = Array1::zeros(n);
    for i in 0..n {
        values[i] = evd.S()[i];
    }
    let u = evd.U();
    let vectors = Array2::from_shape_fn((n, n), |(i, j)| u[(i, j)]);
    Ok((values, vectors))
}

/// Gershgorin upper bound on the largest eigenvalue of a symmetric matrix.
pub fn gershgorin_upper(a: ArrayView2<'_, f64>) -> f64 {
    let n = a.nrows();
    let mut bound = f64::NEG_INFINITY;
    for i in 0..n {
        let mut radius = 0.0;
        for j in 0..n {
            if j != i {
                radius += a[[i, j]].abs();
            }
        }
        bound = bound.max(a[[i, i]] + radius);
    }
    bound
}

/// Orthonormalize the columns of `x` in place (modified Gram-Schmidt, two
/// passes). Columns that collapse numerically are refilled from `rng`.
fn orthonormalize(x: &mut Array2<f64>, rng: &mut ChaCha8Rng) {
    let (_, b) = x.dim();
    for j in 0..b {
        for _pass in 0..2 {
            for i in 0..j {
                let dot = x.column(i).dot(&x.column(j));
                let ci = x.column(i).to_owned();
                x.column_mut(j).scaled_add(-dot, &ci);
            }
        }
        let mut norm = x.column(j).dot(&x.column(j)).sqrt();
        if norm < 1e-12 {
            for v in x.column_mut(j).iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            for i in 0..j {
                let dot = x.column(i).dot(&x.column(j));
                let ci = x.column(i).to_owned();
                x.column_mut(j).scaled_add(-dot, &ci);
            }
            norm = x.column(j).dot(&x.column(j)).sqrt();
        }
        x.column_mut(j).mapv_inplace(|v| v / norm);
    }
}

/// Smallest `k` eigenpairs of the symmetric matrix `q`, computed as the
/// largest eigenpairs of `sigma I - q` by restarted block Lanczos with full
/// reorthogonalization. Returns (ascending eigenvalues, eigenvectors as
/// columns).
pub fn smallest_eigs_lanczos(
    q: ArrayView2<'_, f64>,
    k: usize,
    seed: u64,
) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = q.nrows();
    if k == 0 || k > n {
        return Err(SmtError::InvalidArgument(format!(
            "requested {k} eigenpairs from a {n}x{n} matrix"
        )));
    }
    // For tiny problems the dense path is both faster and exact.
    if n <= 3 * k + 16 {
        let (vals, vecs) = eigh(q)?;
        return Ok((
            vals.slice(s![..k]).to_owned(),
            vecs.slice(s![.., ..k]).to_owned(),
        ));
    }

    let sigma = gershgorin_upper(q) + 1.0;
    let block = (2 * k).clamp(k + 4, n);
    let max_dim = (8 * k + 64).min(n);
    let max_cycles = 60;
    let tol = 1e-10 * sigma.abs().max(1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x426c_4c61_6e63_7a6f);
    let mut x = Array2::from_shape_fn((n, block), |_| rng.gen_range(-1.0..1.0));

    let apply = |v: &Array2<f64>| -> Array2<f64> {
        // (sigma I - Q) V
        let mut out = q.dot(v);
        out.mapv_inplace(|t| -t);
        out.scaled_add(sigma, v);
        out
    };

    for _cycle in 0..max_cycles {
        orthonormalize(&mut x, &mut rng);
        // Krylov basis, grown block by block with full reorthogonalization.
        let mut basis = x.clone();
        while basis.ncols() < max_dim {
            let tail = basis.slice(s![.., basis.ncols() - block.min(basis.ncols())..]);
            let mut next = apply(&tail.to_owned());
            // project out everything computed so far
            for _pass in 0..2 {
                let coeffs = basis.t().dot(&next);
                next -= &basis.dot(&coeffs);
            }
            let mut grown = Array2::zeros((n, basis.ncols() + next.ncols()));
            grown.slice_mut(s![.., ..basis.ncols()]).assign(&basis);
            grown
                .slice_mut(s![.., basis.ncols()..])
                .assign(&next);
            let old = basis.ncols();
            basis = grown;
            let mut rng2 = ChaCha8Rng::seed_from_u64(seed ^ (old as u64));
            orthonormalize(&mut basis, &mut rng2);
        }
        // Rayleigh-Ritz on the subspace.
        let b_basis = apply(&basis);
        let t = basis.t().dot(&b_basis);
        let t_sym = (&t + &t.t()) * 0.5;
        let (tvals, tvecs) = eigh(t_sym.view())?;
        // largest k of (sigma I - Q)
        let m = t_sym.nrows();
        let ritz_vecs = basis.dot(&tvecs.slice(s![.., m - k..]));
        let ritz_vals = tvals.slice(s![m - k..]).to_owned();

        // residual check: || Q v - lambda_Q v ||
        let qv = q.dot(&ritz_vecs);
        let mut worst = 0.0f64;
        for j in 0..k {
            let lambda_q = sigma - ritz_vals[j];
            let mut res = 0.0;
            for i in 0..n {
                let r = qv[[i, j]] - lambda_q * ritz_vecs[[i, j]];
                res += r * r;
            }
            worst = worst.max(res.sqrt());
        }
        if worst < tol {
            // ascending in Q's eigenvalues: largest shifted value first
            let mut vals = Array1::zeros(k);
            let mut vecs = Array2::zeros((n, k));
            for j in 0..k {
                let src = k - 1 - j;
                vals[j] = sigma - ritz_vals[src];
                vecs.column_mut(j).assign(&ritz_vecs.column(src));
            }
            return Ok((vals, vecs));
        }
        // restart from the current Ritz block
        x = ritz_vecs;
        if x.ncols() < block {
            let mut padded = Array2::from_shape_fn((n, block), |_| rng.gen_range(-1.0..1.0));
            padded.slice_mut(s![.., ..x.ncols()]).assign(&x);
            x = padded;
        }
    }
    Err(SmtError::Numeric(
        "block Lanczos did not converge within the cycle budget".into(),
    ))
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    pub(crate) fn orthonormalize_columns(x: &mut Array2<f64>, rng: &mut ChaCha8Rng) {
        orthonormalize(x, rng);
    }
}
