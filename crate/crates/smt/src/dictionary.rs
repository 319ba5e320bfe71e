//! Landmark dictionaries: online K-means (with the spherical variant) and
//! uniform sampling from the data.

use std::collections::HashSet;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SmtError};
use crate::preprocess::NORMALIZE_EPS;

/// `k` landmark vectors, one per row of `elements` (a `k x d` matrix).
/// When `spherical` every row has unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    pub elements: Array2<f64>,
    pub spherical: bool,
}

impl Dictionary {
    pub fn k(&self) -> usize {
        self.elements.nrows()
    }

    pub fn dim(&self) -> usize {
        self.elements.ncols()
    }

    /// Row-major f32 copy for the gemm-heavy encode paths.
    pub fn elements_f32(&self) -> Array2<f32> {
        self.elements.mapv(|v| v as f32)
    }
}

#[derive(Debug, Clone)]
pub struct KmeansReport {
    /// Quantization loss per epoch, measured under that epoch's assignment
    /// before the centroid update.
    pub loss: Vec<f64>,
    pub epochs_run: usize,
    pub converged: bool,
}

const CONVERGENCE_THRESHOLD: f64 = 1e-5;
const ASSIGN_BLOCK: usize = 2048;

fn validate_finite(data: ArrayView2<'_, f64>) -> Result<()> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(SmtError::InvalidArgument("non-finite value in data".into()));
    }
    Ok(())
}

/// Pick `k` byte-distinct rows in seeded random order. Errors when the data
/// has fewer than `k` distinct points.
fn seed_centroids(data: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
    let n = data.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut seen: HashSet<Vec<u8>> = HashSet::with_capacity(k * 2);
    let mut centroids = Array2::zeros((k, data.ncols()));
    let mut taken = 0;
    for &i in &order {
        let row = data.row(i);
        let bytes: Vec<u8> = row.iter().flat_map(|v| v.to_le_bytes()).collect();
        if seen.insert(bytes) {
            centroids.row_mut(taken).assign(&row);
            taken += 1;
            if taken == k {
                return Ok(centroids);
            }
        }
    }
    Err(SmtError::InvalidArgument(format!(
        "requested {k} centroids but data has only {taken} distinct points"
    )))
}

/// Nearest-centroid assignment for a block of rows; ties go to the lowest
/// index.
fn assign_block(
    block: &Array2<f32>,
    cents: &Array2<f32>,
    cent_sq_norms: &[f32],
    spherical: bool,
) -> Vec<u32> {
    let scores = block.dot(&cents.t()); // (rows, k) dot products
    let mut out = Vec::with_capacity(block.nrows());
    for score_row in scores.axis_iter(Axis(0)) {
        let mut best = 0usize;
        let mut best_val = f32::NEG_INFINITY;
        for (j, &s) in score_row.iter().enumerate() {
            // maximize dot - ||c||^2/2 == minimize squared distance
            let v = if spherical { s } else { s - 0.5 * cent_sq_norms[j] };
            if v > best_val {
                best_val = v;
                best = j;
            }
        }
        out.push(best as u32);
    }
    out
}

/// Online 1-sparse dictionary learning: alternate nearest-centroid assignment
/// with a damped centroid update `phi += eta * (cluster_mean - phi)`. In
/// spherical mode the data is normalized up front and the centroids are
/// renormalized after every update. Empty clusters are re-seeded from random
/// data points.
pub fn kmeans_fit(
    data: ArrayView2<'_, f64>,
    k: usize,
    spherical: bool,
    epochs: usize,
    eta: f64,
    seed: u64,
) -> Result<(Dictionary, KmeansReport)> {
    let dim = data.ncols();
    if k == 0 || data.nrows() == 0 || dim == 0 {
        return Err(SmtError::InvalidArgument("empty data or zero centroids".into()));
    }
    if !(eta > 0.0) {
        return Err(SmtError::InvalidArgument(format!("eta must be positive, got {eta}")));
    }
    validate_finite(data)?;
    if k > data.nrows() {
        return Err(SmtError::InvalidArgument(format!(
            "requested {k} centroids from {} points",
            data.nrows()
        )));
    }

    // Spherical mode works on the unit sphere; zero rows cannot be projected
    // there and are dropped from the fit.
    let owned: Array2<f64> = if spherical {
        let mut rows = Vec::new();
        for row in data.axis_iter(Axis(0)) {
            let norm = row.dot(&row).sqrt();
            if norm > NORMALIZE_EPS {
                rows.extend(row.iter().map(|v| v / norm));
            }
        }
        let n_kept = rows.len() / dim;
        if n_kept < k {
            return Err(SmtError::InvalidArgument(format!(
                "requested {k} centroids but only {n_kept} nonzero points in spherical mode"
            )));
        }
        Array2::from_shape_vec((n_kept, dim), rows).expect("row count")
    } else {
        data.to_owned()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(&owned, k, &mut rng)?;
    let data_f32 = owned.mapv(|v| v as f32);
    let n = owned.nrows();

    let mut report = KmeansReport {
        loss: Vec::new(),
        epochs_run: 0,
        converged: false,
    };
    let mut assignments = vec![0u32; n];

    for _epoch in 0..epochs {
        let cents_f32 = centroids.mapv(|v| v as f32);
        let cent_sq: Vec<f32> = cents_f32
            .axis_iter(Axis(0))
            .map(|c| c.dot(&c))
            .collect();

        let mut start = 0;
        while start < n {
            let end = (start + ASSIGN_BLOCK).min(n);
            let block = data_f32.slice(ndarray::s![start..end, ..]).to_owned();
            for (off, idx) in assign_block(&block, &cents_f32, &cent_sq, spherical)
                .into_iter()
                .enumerate()
            {
                assignments[start + off] = idx;
            }
            start = end;
        }
        // quantization loss under this epoch's assignment, in f64
        let mut loss = 0.0f64;
        for (i, &a) in assignments.iter().enumerate() {
            let diff = &owned.row(i) - &centroids.row(a as usize);
            loss += diff.dot(&diff);
        }
        report.loss.push(loss);
        report.epochs_run += 1;

        // damped update toward per-cluster means
        let mut sums = Array2::<f64>::zeros((k, dim));
        let mut counts = vec![0u64; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a as usize] += 1;
            let mut s = sums.row_mut(a as usize);
            s += &owned.row(i);
        }
        let mut movement = 0.0;
        for j in 0..k {
            let mut new_c: Array1<f64> = if counts[j] == 0 {
                owned.row(rng.gen_range(0..n)).to_owned()
            } else {
                let mean = sums.row(j).mapv(|v| v / counts[j] as f64);
                let old = centroids.row(j);
                &old * (1.0 - eta) + &mean * eta
            };
            if spherical {
                let norm = new_c.dot(&new_c).sqrt();
                if norm > NORMALIZE_EPS {
                    new_c.mapv_inplace(|v| v / norm);
                }
            }
            let diff = &new_c - &centroids.row(j);
            movement += diff.dot(&diff).sqrt();
            centroids.row_mut(j).assign(&new_c);
        }
        movement /= k as f64;
        if movement < CONVERGENCE_THRESHOLD {
            report.converged = true;
            break;
        }
    }

    Ok((
        Dictionary {
            elements: centroids,
            spherical,
        },
        report,
    ))
}

/// Draw `k` rows uniformly without replacement (zero rows excluded), then
/// L2-normalize. Deterministic for a fixed seed.
pub fn sample_dictionary(data: ArrayView2<'_, f64>, k: usize, seed: u64) -> Result<Dictionary> {
    if k == 0 {
        return Err(SmtError::InvalidArgument("zero-size dictionary".into()));
    }
    validate_finite(data)?;
    let candidates: Vec<usize> = (0..data.nrows())
        .filter(|&i| {
            let r = data.row(i);
            r.dot(&r).sqrt() > NORMALIZE_EPS
        })
        .collect();
    if k > candidates.len() {
        return Err(SmtError::InvalidArgument(format!(
            "requested {k} landmarks but only {} nonzero points",
            candidates.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = {
        let mut idx = candidates;
        idx.shuffle(&mut rng);
        idx.truncate(k);
        idx
    };
    let mut elements = Array2::zeros((k, data.ncols()));
    for (row, &i) in chosen.iter().enumerate() {
        let src = data.row(i);
        let norm = src.dot(&src).sqrt();
        elements.row_mut(row).assign(&src.mapv(|v| v / norm));
    }
    Ok(Dictionary {
        elements,
        spherical: true,
    })
}
