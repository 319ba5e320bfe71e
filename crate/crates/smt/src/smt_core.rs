//! Co-occurrence statistics over sparse codes and the constrained projection
//! solve.
//!
//! The statistics track two `K x K` matrices: the second moment `V` of the
//! codes and the difference energy `C` accumulated from co-occurring code
//! pairs (or neighborhoods). The projection `P` minimizes `tr(P C P^T)`
//! subject to `P V P^T = I`; it is obtained by whitening code space with
//! `V^(-1/2)` restricted to the retained eigenspace of `V`, then taking the
//! trailing eigenvectors of `Q = V^(-1/2) C V^(-1/2)`.

use std::fmt;

use ndarray::{s, Array1, Array2, ArrayView2};

use crate::error::{Result, SmtError};
use crate::linalg::{eigh, smallest_eigs_lanczos};
use crate::sparse::SparseCode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AccumulationMode {
    /// First-order differences between explicit code pairs.
    Pairwise,
    /// One column per center: `|n(i)| * center - sum(neighbors)`.
    Aggregated,
    /// One column per center: `center - sum(w_j * neighbor_j)`, weights sum 1.
    SecondOrder,
}

impl fmt::Display for AccumulationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AccumulationMode::Pairwise => write!(f, "pairwise"),
            AccumulationMode::Aggregated => write!(f, "aggregated"),
            AccumulationMode::SecondOrder => write!(f, "second_order"),
        }
    }
}

/// Accumulated second-moment and difference-energy matrices.
///
/// Both matrices are kept as unnormalized upper-triangular sums; counters
/// record how many samples and pairs went in, and normalization happens when
/// the matrices are read out. Accumulators are single-writer; parallel
/// pipelines keep one per worker and combine them with [`merge_stats`].
#[derive(Debug, Clone)]
pub struct CooccurrenceStats {
    k: usize,
    mode: AccumulationMode,
    /// Whether pair/neighborhood accumulation also feeds `V`. When false,
    /// `V` only grows through [`CooccurrenceStats::accumulate_second_moment`].
    v_from_pairs: bool,
    v_upper: Array2<f64>,
    c_upper: Array2<f64>,
    /// Running sum of code vectors, tracked alongside `V` so centered PCA
    /// can be fit from the same sweep.
    code_sum: Array1<f64>,
    n_samples: u64,
    n_pairs: u64,
}

fn add_outer_upper(m: &mut Array2<f64>, entries: &[(u32, f64)], scale: f64) {
    let k = m.ncols();
    let data = m.as_slice_mut().expect("contiguous stats matrix");
    for (p, &(i, vi)) in entries.iter().enumerate() {
        let row = &mut data[i as usize * k..(i as usize + 1) * k];
        let w = vi * scale;
        for &(j, vj) in &entries[p..] {
            row[j as usize] += w * vj;
        }
    }
}

/// Sparse difference `a - b` with exact cancellations dropped.
fn sparse_difference(a: &SparseCode, b: &SparseCode) -> Vec<(u32, f64)> {
    let mut out = Vec::with_capacity(a.nnz() + b.nnz());
    let (mut ia, mut ib) = (0, 0);
    while ia < a.entries.len() && ib < b.entries.len() {
        let (i, va) = a.entries[ia];
        let (j, vb) = b.entries[ib];
        match i.cmp(&j) {
            std::cmp::Ordering::Less => {
                out.push((i, va));
                ia += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push((j, -vb));
                ib += 1;
            }
            std::cmp::Ordering::Equal => {
                let d = va - vb;
                if d != 0.0 {
                    out.push((i, d));
                }
                ia += 1;
                ib += 1;
            }
        }
    }
    out.extend(a.entries[ia..].iter().copied());
    out.extend(b.entries[ib..].iter().map(|&(j, v)| (j, -v)));
    out
}

/// Combine weighted codes into one sorted coefficient list.
fn weighted_combination(terms: &[(&SparseCode, f64)]) -> Vec<(u32, f64)> {
    let mut all: Vec<(u32, f64)> = Vec::new();
    for (code, w) in terms {
        all.extend(code.entries.iter().map(|&(i, v)| (i, v * w)));
    }
    all.sort_unstable_by_key(|e| e.0);
    let mut out: Vec<(u32, f64)> = Vec::with_capacity(all.len());
    for (i, v) in all {
        match out.last_mut() {
            Some(last) if last.0 == i => last.1 += v,
            _ => out.push((i, v)),
        }
    }
    out.retain(|&(_, v)| v != 0.0);
    out
}

impl CooccurrenceStats {
    pub fn new(k: usize, mode: AccumulationMode) -> Self {
        CooccurrenceStats {
            k,
            mode,
            v_from_pairs: true,
            v_upper: Array2::zeros((k, k)),
            c_upper: Array2::zeros((k, k)),
            code_sum: Array1::zeros(k),
            n_samples: 0,
            n_pairs: 0,
        }
    }

    pub fn with_v_from_pairs(mut self, yes: bool) -> Self {
        self.v_from_pairs = yes;
        self
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn mode(&self) -> AccumulationMode {
        self.mode
    }

    pub fn n_samples(&self) -> u64 {
        self.n_samples
    }

    pub fn n_pairs(&self) -> u64 {
        self.n_pairs
    }

    pub fn v_from_pairs(&self) -> bool {
        self.v_from_pairs
    }

    fn check_code(&self, code: &SparseCode) -> Result<()> {
        if code.dim != self.k {
            return Err(SmtError::InvalidArgument(format!(
                "code dim {} vs stats dim {}",
                code.dim, self.k
            )));
        }
        Ok(())
    }

    /// `V += alpha alpha^T`, `n_samples += 1`.
    pub fn accumulate_second_moment(&mut self, code: &SparseCode) -> Result<()> {
        self.check_code(code)?;
        add_outer_upper(&mut self.v_upper, &code.entries, 1.0);
        for &(i, v) in &code.entries {
            self.code_sum[i as usize] += v;
        }
        self.n_samples += 1;
        Ok(())
    }

    /// `C += (a - b)(a - b)^T`, `n_pairs += 1`. Unless disabled, each code
    /// also contributes half of its second moment to `V` so a full pair sweep
    /// keeps `V` an average over pair slots.
    pub fn accumulate_pair(&mut self, a: &SparseCode, b: &SparseCode) -> Result<()> {
        if self.mode != AccumulationMode::Pairwise {
            return Err(SmtError::ModeMismatch {
                expected: AccumulationMode::Pairwise.to_string(),
                got: self.mode.to_string(),
            });
        }
        self.check_code(a)?;
        self.check_code(b)?;
        let delta = sparse_difference(a, b);
        add_outer_upper(&mut self.c_upper, &delta, 1.0);
        self.n_pairs += 1;
        if self.v_from_pairs {
            add_outer_upper(&mut self.v_upper, &a.entries, 0.5);
            add_outer_upper(&mut self.v_upper, &b.entries, 0.5);
            for &(i, v) in &a.entries {
                self.code_sum[i as usize] += 0.5 * v;
            }
            for &(i, v) in &b.entries {
                self.code_sum[i as usize] += 0.5 * v;
            }
            self.n_samples += 1;
        }
        Ok(())
    }

    /// Accumulate one neighborhood column of the difference operator:
    /// aggregated mode uses `|n| * center - sum(neighbors)`, second-order mode
    /// uses `center - sum(w_j * neighbor_j)` with caller-supplied weights
    /// summing to 1. The center contributes its second moment to `V` once.
    pub fn accumulate_neighborhood(
        &mut self,
        center: &SparseCode,
        neighbors: &[&SparseCode],
        weights: Option<&[f64]>,
    ) -> Result<()> {
        self.check_code(center)?;
        for n in neighbors {
            self.check_code(n)?;
        }
        if neighbors.is_empty() {
            return Err(SmtError::InvalidArgument("empty neighborhood".into()));
        }
        let mut terms: Vec<(&SparseCode, f64)> = Vec::with_capacity(neighbors.len() + 1);
        match self.mode {
            AccumulationMode::Aggregated => {
                if weights.is_some() {
                    return Err(SmtError::InvalidArgument(
                        "aggregated mode takes no weights".into(),
                    ));
                }
                terms.push((center, neighbors.len() as f64));
                for n in neighbors {
                    terms.push((n, -1.0));
                }
            }
            AccumulationMode::SecondOrder => {
                let w = weights.ok_or_else(|| {
                    SmtError::InvalidArgument("second_order mode requires weights".into())
                })?;
                if w.len() != neighbors.len() {
                    return Err(SmtError::InvalidArgument(format!(
                        "{} weights for {} neighbors",
                        w.len(),
                        neighbors.len()
                    )));
                }
                let sum: f64 = w.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(SmtError::InvalidArgument(format!(
                        "weights must sum to 1, got {sum}"
                    )));
                }
                terms.push((center, 1.0));
                for (n, &wj) in neighbors.iter().zip(w) {
                    terms.push((n, -wj));
                }
            }
            AccumulationMode::Pairwise => {
                return Err(SmtError::ModeMismatch {
                    expected: "aggregated or second_order".into(),
                    got: self.mode.to_string(),
                });
            }
        }
        let delta = weighted_combination(&terms);
        add_outer_upper(&mut self.c_upper, &delta, 1.0);
        self.n_pairs += 1;
        if self.v_from_pairs {
            add_outer_upper(&mut self.v_upper, &center.entries, 1.0);
            for &(i, v) in &center.entries {
                self.code_sum[i as usize] += v;
            }
            self.n_samples += 1;
        }
        Ok(())
    }

    /// Normalized, symmetrized second moment `V = (1/n_samples) sum aa^T`.
    pub fn v_matrix(&self) -> Result<Array2<f64>> {
        if self.n_samples == 0 {
            return Err(SmtError::State("no samples accumulated".into()));
        }
        Ok(symmetrize_scaled(&self.v_upper, 1.0 / self.n_samples as f64))
    }

    /// Mean code vector over the same samples as `V`.
    pub fn code_mean(&self) -> Result<Array1<f64>> {
        if self.n_samples == 0 {
            return Err(SmtError::State("no samples accumulated".into()));
        }
        Ok(&self.code_sum / self.n_samples as f64)
    }

    /// Normalized, symmetrized difference energy `C = (1/n_pairs) A D D^T A^T`.
    pub fn c_matrix(&self) -> Result<Array2<f64>> {
        if self.n_pairs == 0 {
            return Err(SmtError::State("no pairs accumulated".into()));
        }
        Ok(symmetrize_scaled(&self.c_upper, 1.0 / self.n_pairs as f64))
    }

    pub(crate) fn raw_parts(&self) -> (&Array2<f64>, &Array2<f64>, &Array1<f64>) {
        (&self.v_upper, &self.c_upper, &self.code_sum)
    }

    pub(crate) fn from_raw_parts(
        mode: AccumulationMode,
        v_from_pairs: bool,
        v_upper: Array2<f64>,
        c_upper: Array2<f64>,
        code_sum: Array1<f64>,
        n_samples: u64,
        n_pairs: u64,
    ) -> Self {
        let k = v_upper.nrows();
        CooccurrenceStats {
            k,
            mode,
            v_from_pairs,
            v_upper,
            c_upper,
            code_sum,
            n_samples,
            n_pairs,
        }
    }
}

fn symmetrize_scaled(upper: &Array2<f64>, scale: f64) -> Array2<f64> {
    let k = upper.nrows();
    let mut full = Array2::zeros((k, k));
    for i in 0..k {
        for j in i..k {
            let v = upper[[i, j]] * scale;
            full[[i, j]] = v;
            full[[j, i]] = v;
        }
    }
    full
}

/// Elementwise sum of two accumulators. Associative and commutative; shapes,
/// modes, and `v_from_pairs` must match.
pub fn merge_stats(a: &CooccurrenceStats, b: &CooccurrenceStats) -> Result<CooccurrenceStats> {
    if a.k != b.k {
        return Err(SmtError::InvalidArgument(format!(
            "stats dims differ: {} vs {}",
            a.k, b.k
        )));
    }
    if a.mode != b.mode {
        return Err(SmtError::ModeMismatch {
            expected: a.mode.to_string(),
            got: b.mode.to_string(),
        });
    }
    if a.v_from_pairs != b.v_from_pairs {
        return Err(SmtError::InvalidArgument(
            "stats disagree on v_from_pairs".into(),
        ));
    }
    Ok(CooccurrenceStats {
        k: a.k,
        mode: a.mode,
        v_from_pairs: a.v_from_pairs,
        v_upper: &a.v_upper + &b.v_upper,
        c_upper: &a.c_upper + &b.c_upper,
        code_sum: &a.code_sum + &b.code_sum,
        n_samples: a.n_samples + b.n_samples,
        n_pairs: a.n_pairs + b.n_pairs,
    })
}

/// Merge `b` into `a` without allocating a third accumulator.
pub fn merge_stats_into(a: &mut CooccurrenceStats, b: &CooccurrenceStats) -> Result<()> {
    let merged = merge_stats(a, b)?;
    *a = merged;
    Ok(())
}

/// The solved projection: `projection` is `d_emb x K` with rows ordered by
/// ascending eigenvalue of `Q`; `eigenvalues` holds all `drop_first + d_emb`
/// trailing eigenvalues before dropping.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralEmbedding {
    pub projection: Array2<f64>,
    pub eigenvalues: Vec<f64>,
    pub drop_first: usize,
    /// Absolute eigenvalue floor used when inverting `V`.
    pub v_floor: f64,
}

impl SpectralEmbedding {
    pub fn d_emb(&self) -> usize {
        self.projection.nrows()
    }

    pub fn k(&self) -> usize {
        self.projection.ncols()
    }

    /// Retained trailing eigenvalues (after dropping the first `drop_first`).
    pub fn retained_eigenvalues(&self) -> &[f64] {
        &self.eigenvalues[self.drop_first..]
    }
}

pub const DEFAULT_V_FLOOR_REL: f64 = 1e-7;

/// Above this size the trailing eigenvectors of `Q` come from block Lanczos
/// instead of a full decomposition.
pub const DENSE_EIG_THRESHOLD: usize = 8192;

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub dense_eig_threshold: usize,
    pub lanczos_seed: u64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            dense_eig_threshold: DENSE_EIG_THRESHOLD,
            lanczos_seed: 0x534d_5445,
        }
    }
}

/// Solve `min tr(P C P^T)` s.t. `P V P^T = I` for a `d_emb x K` projection.
///
/// Eigendirections of `V` below `v_floor_rel * max_eigenvalue` are excluded
/// from the solution space (unused dictionary elements make `V` rank
/// deficient), so the constraint holds on the retained subspace.
pub fn solve_embedding(
    stats: &CooccurrenceStats,
    d_emb: usize,
    drop_first: usize,
    v_floor_rel: f64,
) -> Result<SpectralEmbedding> {
    solve_embedding_with(stats, d_emb, drop_first, v_floor_rel, SolveOptions::default())
}

/// The whitening map of `V` on its retained eigenspace:
/// `S = Lambda_r^(-1/2) W_r^T`, an `(r, K)` matrix with `S V S^T = I`.
/// Returns the map and the absolute eigenvalue floor that was applied.
pub fn code_whitening_map(
    stats: &CooccurrenceStats,
    v_floor_rel: f64,
) -> Result<(Array2<f64>, f64)> {
    if !(0.0..1.0).contains(&v_floor_rel) {
        return Err(SmtError::InvalidArgument(format!(
            "v_floor_rel must lie in [0, 1), got {v_floor_rel}"
        )));
    }
    let v = stats.v_matrix()?;
    let (v_vals, v_vecs) = eigh(v.view())?;
    let k = stats.k();
    let max_eig = v_vals[k - 1];
    if !(max_eig > 0.0) {
        return Err(SmtError::Rank {
            requested: 1,
            rank: 0,
        });
    }
    let floor = v_floor_rel * max_eig;
    // eigenvalues ascend: the retained block is the trailing one
    let first_retained = v_vals
        .iter()
        .position(|&x| x >= floor && x > 0.0)
        .unwrap_or(k);
    let mut s_map = v_vecs.slice(s![.., first_retained..]).t().to_owned(); // (r, K)
    for (row, &val) in s_map
        .rows_mut()
        .into_iter()
        .zip(v_vals.slice(s![first_retained..]).iter())
    {
        let scale = val.powf(-0.5);
        let mut row = row;
        row.mapv_inplace(|x| x * scale);
    }
    Ok((s_map, floor))
}

pub fn solve_embedding_with(
    stats: &CooccurrenceStats,
    d_emb: usize,
    drop_first: usize,
    v_floor_rel: f64,
    opts: SolveOptions,
) -> Result<SpectralEmbedding> {
    if d_emb == 0 {
        return Err(SmtError::InvalidArgument("d_emb must be positive".into()));
    }
    let (s_map, floor) = code_whitening_map(stats, v_floor_rel)?;
    let r = s_map.nrows();
    let wanted = d_emb + drop_first;
    if wanted > r {
        return Err(SmtError::Rank {
            requested: wanted,
            rank: r,
        });
    }
    let c = stats.c_matrix()?;

    // Q = S C S^T, numerically resymmetrized.
    let q = {
        let t = s_map.dot(&c);
        drop(c);
        let mut q = t.dot(&s_map.t());
        for i in 0..r {
            for j in 0..i {
                let m = 0.5 * (q[[i, j]] + q[[j, i]]);
                q[[i, j]] = m;
                q[[j, i]] = m;
            }
        }
        q
    };

    if q.iter().any(|x| !x.is_finite()) {
        return Err(SmtError::Numeric("non-finite entries while forming Q".into()));
    }

    let (q_vals, q_vecs) = if r <= opts.dense_eig_threshold {
        let (vals, vecs) = eigh(q.view())?;
        (
            vals.slice(s![..wanted]).to_owned(),
            vecs.slice(s![.., ..wanted]).to_owned(),
        )
    } else {
        smallest_eigs_lanczos(q.view(), wanted, opts.lanczos_seed)?
    };

    // P = U_kept^T S, rows in ascending eigenvalue order.
    let kept = q_vecs.slice(s![.., drop_first..]);
    let mut projection = kept.t().dot(&s_map).as_standard_layout().into_owned();
    canonicalize_row_signs(&mut projection);

    Ok(SpectralEmbedding {
        projection,
        eigenvalues: q_vals.to_vec(),
        drop_first,
        v_floor: floor,
    })
}

/// Flip row signs so the entry of largest magnitude in each row is positive.
/// The objective and constraint are invariant; this stabilizes artifacts.
fn canonicalize_row_signs(p: &mut Array2<f64>) {
    for mut row in p.rows_mut() {
        let mut best = 0.0f64;
        let mut sign = 1.0f64;
        for &v in row.iter() {
            if v.abs() > best {
                best = v.abs();
                sign = if v < 0.0 { -1.0 } else { 1.0 };
            }
        }
        if sign < 0.0 {
            row.mapv_inplace(|v| -v);
        }
    }
}

/// `tr(P C P^T)` under the stats' normalized difference energy.
pub fn objective_value(p: ArrayView2<'_, f64>, stats: &CooccurrenceStats) -> Result<f64> {
    if p.ncols() != stats.k() {
        return Err(SmtError::InvalidArgument(format!(
            "projection has {} columns, stats dim {}",
            p.ncols(),
            stats.k()
        )));
    }
    let c = stats.c_matrix()?;
    let pc = p.dot(&c);
    let mut trace = 0.0;
    for i in 0..p.nrows() {
        trace += pc.row(i).dot(&p.row(i));
    }
    Ok(trace)
}
