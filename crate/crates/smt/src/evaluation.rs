//! Soft-KNN classification over cosine similarities, accuracy reporting, PCA
//! dimensionality reduction, and the sparse-feature ablation baselines.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Image;
use crate::error::{Result, SmtError};
use crate::linalg::eigh;
use crate::representation::{embed_dataset, CodeMap, EncodingPipeline, LinearCodeMap, RawCodeMap};
use crate::smt_core::{code_whitening_map, CooccurrenceStats};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnnConfig {
    pub k: usize,
    /// Softmax temperature applied to cosine similarities.
    pub temperature: f64,
}

impl Default for KnnConfig {
    fn default() -> Self {
        KnnConfig {
            k: 30,
            temperature: 0.07,
        }
    }
}

impl KnnConfig {
    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(SmtError::InvalidArgument("k must be at least 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(SmtError::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

fn row_norms(m: ArrayView2<'_, f32>) -> Vec<f32> {
    m.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect()
}

/// Predict one label from the `k` highest-cosine neighbors; each neighbor
/// votes `exp(cos / temperature)` for its class and ties go to the smallest
/// label.
pub fn soft_knn_classify(
    train: ArrayView2<'_, f32>,
    labels: &[u8],
    query: ArrayView1<'_, f32>,
    cfg: &KnnConfig,
) -> Result<u8> {
    cfg.validate()?;
    if train.nrows() == 0 {
        return Err(SmtError::InvalidArgument("empty training set".into()));
    }
    if train.nrows() != labels.len() {
        return Err(SmtError::InvalidArgument(format!(
            "{} training rows vs {} labels",
            train.nrows(),
            labels.len()
        )));
    }
    if train.ncols() != query.len() {
        return Err(SmtError::InvalidArgument(format!(
            "query dim {} vs train dim {}",
            query.len(),
            train.ncols()
        )));
    }
    let norms = row_norms(train);
    let qnorm = query.dot(&query).sqrt();
    let mut cosines = Vec::with_capacity(train.nrows());
    for (row, &n) in train.rows().into_iter().zip(&norms) {
        let denom = n * qnorm;
        cosines.push(if denom > 0.0 { row.dot(&query) / denom } else { 0.0 });
    }
    Ok(vote(&cosines, labels, cfg))
}

fn vote(cosines: &[f32], labels: &[u8], cfg: &KnnConfig) -> u8 {
    let n = cosines.len();
    let k = cfg.k.min(n);
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.select_nth_unstable_by(k - 1, |&a, &b| {
        cosines[b as usize]
            .total_cmp(&cosines[a as usize])
            .then(a.cmp(&b))
    });
    let mut scores = std::collections::BTreeMap::<u8, f64>::new();
    for &i in &order[..k] {
        let w = (f64::from(cosines[i as usize]) / cfg.temperature).exp();
        *scores.entry(labels[i as usize]).or_insert(0.0) += w;
    }
    // argmax with ties to the smallest label (BTreeMap iterates ascending)
    let mut best_label = 0u8;
    let mut best_score = f64::NEG_INFINITY;
    for (&label, &score) in &scores {
        if score > best_score {
            best_score = score;
            best_label = label;
        }
    }
    best_label
}

/// Fraction of test points whose soft-KNN prediction matches the test label.
/// Similarities are computed in blocked matrix products; queries run in
/// parallel.
pub fn knn_accuracy(
    train: ArrayView2<'_, f32>,
    train_labels: &[u8],
    test: ArrayView2<'_, f32>,
    test_labels: &[u8],
    cfg: &KnnConfig,
) -> Result<f64> {
    cfg.validate()?;
    if train.nrows() == 0 || test.nrows() == 0 {
        return Err(SmtError::InvalidArgument("empty train or test set".into()));
    }
    if train.nrows() != train_labels.len() || test.nrows() != test_labels.len() {
        return Err(SmtError::InvalidArgument("label count mismatch".into()));
    }
    if train.ncols() != test.ncols() {
        return Err(SmtError::InvalidArgument(format!(
            "train dim {} vs test dim {}",
            train.ncols(),
            test.ncols()
        )));
    }
    let train_norms = row_norms(train);
    const BLOCK: usize = 256;
    let n_test = test.nrows();
    let blocks: Vec<usize> = (0..n_test).step_by(BLOCK).collect();
    let correct: usize = blocks
        .par_iter()
        .map(|&start| {
            let end = (start + BLOCK).min(n_test);
            let q = test.slice(s![start..end, ..]);
            let scores = q.dot(&train.t()); // (block, n_train)
            let mut hits = 0usize;
            let mut cosines = vec![0.0f32; train.nrows()];
            for (bi, row) in scores.rows().into_iter().enumerate() {
                let qr = test.row(start + bi);
                let qnorm = qr.dot(&qr).sqrt();
                for (c, (&s, &n)) in cosines.iter_mut().zip(row.iter().zip(&train_norms)) {
                    let denom = n * qnorm;
                    *c = if denom > 0.0 { s / denom } else { 0.0 };
                }
                if vote(&cosines, train_labels, cfg) == test_labels[start + bi] {
                    hits += 1;
                }
            }
            hits
        })
        .sum();
    Ok(correct as f64 / n_test as f64)
}

/// Centered top-variance projection.
#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: Array1<f64>,
    /// `(n_components, dim)`, orthonormal rows ordered by descending variance.
    pub components: Array2<f64>,
    /// Variances along the components, descending.
    pub explained: Vec<f64>,
}

/// Fit PCA from the uncentered second moment `E[x x^T]` and mean `E[x]`,
/// which is how the sparse-code paths accumulate their inputs.
pub fn pca_fit_from_moments(
    second_moment: &Array2<f64>,
    mean: &Array1<f64>,
    n_components: usize,
) -> Result<Pca> {
    pca_fit_inner(second_moment, mean, n_components, false)
}

/// Like [`pca_fit_from_moments`] but clamps the component count to the
/// covariance rank instead of erroring.
pub fn pca_fit_up_to(
    second_moment: &Array2<f64>,
    mean: &Array1<f64>,
    n_components: usize,
) -> Result<Pca> {
    pca_fit_inner(second_moment, mean, n_components, true)
}

fn pca_fit_inner(
    second_moment: &Array2<f64>,
    mean: &Array1<f64>,
    n_components: usize,
    clamp_to_rank: bool,
) -> Result<Pca> {
    let d = mean.len();
    if second_moment.dim() != (d, d) {
        return Err(SmtError::InvalidArgument(format!(
            "moment matrix {:?} vs mean dim {d}",
            second_moment.dim()
        )));
    }
    if n_components == 0 || n_components > d {
        return Err(SmtError::InvalidArgument(format!(
            "n_components {n_components} out of range for dim {d}"
        )));
    }
    let mut cov = second_moment.clone();
    for i in 0..d {
        for j in 0..d {
            cov[[i, j]] -= mean[i] * mean[j];
        }
    }
    let (vals, vecs) = eigh(cov.view())?;
    let max_val = vals[d - 1].max(0.0);
    let rank = vals.iter().filter(|&&v| v > 1e-12 * max_val.max(1e-300)).count();
    let n_components = if clamp_to_rank {
        n_components.min(rank.max(1))
    } else {
        n_components
    };
    if n_components > rank {
        return Err(SmtError::Rank {
            requested: n_components,
            rank,
        });
    }
    // take the top-variance eigenpairs, descending
    let mut components = Array2::zeros((n_components, d));
    let mut explained = Vec::with_capacity(n_components);
    for c in 0..n_components {
        let src = d - 1 - c;
        components.row_mut(c).assign(&vecs.column(src));
        explained.push(vals[src]);
    }
    Ok(Pca {
        mean: mean.clone(),
        components,
        explained,
    })
}

/// Fit PCA on dense rows.
pub fn pca_fit(data: ArrayView2<'_, f64>, n_components: usize) -> Result<Pca> {
    let (n, _d) = data.dim();
    if n == 0 {
        return Err(SmtError::InvalidArgument("empty data".into()));
    }
    let mean = data.mean_axis(ndarray::Axis(0)).expect("nonempty");
    let moment = data.t().dot(&data) / n as f64;
    pca_fit_from_moments(&moment, &mean, n_components)
}

/// Project a vector onto the principal components after mean removal.
pub fn pca_reduce(x: ArrayView1<'_, f64>, pca: &Pca) -> Result<Array1<f64>> {
    if x.len() != pca.mean.len() {
        return Err(SmtError::InvalidArgument(format!(
            "vector dim {} vs PCA dim {}",
            x.len(),
            pca.mean.len()
        )));
    }
    let centered = &x - &pca.mean;
    Ok(pca.components.dot(&centered))
}

/// Code map that mirrors the projection path with PCA in place of the
/// spectral solve: `normalize(W (alpha - mu))` per patch before pooling.
pub struct PcaCodeMap {
    components_t: Array2<f64>,
    offset: Array1<f64>, // W mu
}

impl PcaCodeMap {
    pub fn new(pca: &Pca) -> Self {
        PcaCodeMap {
            components_t: pca.components.t().to_owned().as_standard_layout().into_owned(),
            offset: pca.components.dot(&pca.mean),
        }
    }
}

impl CodeMap for PcaCodeMap {
    fn output_dim(&self) -> usize {
        self.components_t.ncols()
    }

    fn map(&self, code: &crate::sparse::SparseCode, out: &mut [f64]) {
        for (o, &m) in out.iter_mut().zip(self.offset.iter()) {
            *o -= m;
        }
        for &(i, v) in &code.entries {
            let row = self.components_t.row(i as usize);
            let row = row.as_slice().expect("row-major components");
            for (o, &p) in out.iter_mut().zip(row) {
                *o += v * p;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineVariant {
    /// Pool raw sparse codes; no projection at all.
    SparseOnly,
    /// Apply the code-space whitening `V^(-1/2)` in place of the projection.
    SparseWhitened,
}

/// Embed a set of images under an ablation baseline, reusing the pipeline's
/// exact preprocessing, encoding, and pooling path.
pub fn feature_baseline(
    images: &[Image],
    encoding: &EncodingPipeline,
    stats: Option<&CooccurrenceStats>,
    v_floor_rel: f64,
    variant: BaselineVariant,
) -> Result<Array2<f32>> {
    match variant {
        BaselineVariant::SparseOnly => {
            let map = RawCodeMap {
                k: encoding.dictionary.k(),
            };
            embed_dataset(images, |img| encoding.embed_image_with_map(img, &map))
        }
        BaselineVariant::SparseWhitened => {
            let stats = stats.ok_or_else(|| {
                SmtError::State("whitened baseline needs accumulated statistics".into())
            })?;
            let (s_map, _) = code_whitening_map(stats, v_floor_rel)?;
            let map = LinearCodeMap::new(&s_map);
            embed_dataset(images, |img| encoding.embed_image_with_map(img, &map))
        }
    }
}
