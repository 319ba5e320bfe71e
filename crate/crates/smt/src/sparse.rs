//! Sparse feature lifting: 1-sparse vector quantization and thresholded
//! general quantization over a landmark dictionary, plus the compact binary
//! stream format used to move codes between pipeline stages.

use std::io::{Read, Write};

use ndarray::{Array2, ArrayView1, Axis};

use crate::dataset::PatchGrid;
use crate::dictionary::Dictionary;
use crate::error::{Result, SmtError};
use crate::preprocess::{contextual_mean, l2_normalize_rows, WhiteningOperator, NORMALIZE_EPS};

/// Nonnegative sparse vector over a `dim`-element dictionary, stored as
/// (index, value) pairs with strictly increasing indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCode {
    pub dim: usize,
    pub entries: Vec<(u32, f64)>,
}

impl SparseCode {
    pub fn new(dim: usize, entries: Vec<(u32, f64)>) -> Result<Self> {
        let mut prev: Option<u32> = None;
        for &(i, v) in &entries {
            if i as usize >= dim {
                return Err(SmtError::InvalidArgument(format!(
                    "sparse index {i} out of range for dim {dim}"
                )));
            }
            if v <= 0.0 || !v.is_finite() {
                return Err(SmtError::InvalidArgument(format!("sparse value {v} must be positive")));
            }
            if let Some(p) = prev {
                if i <= p {
                    return Err(SmtError::InvalidArgument(
                        "sparse indices must be strictly increasing".into(),
                    ));
                }
            }
            prev = Some(i);
        }
        Ok(SparseCode { dim, entries })
    }

    pub fn one_hot(dim: usize, index: usize) -> Self {
        assert!(index < dim);
        SparseCode {
            dim,
            entries: vec![(index as u32, 1.0)],
        }
    }

    /// Binary code from sorted active indices.
    pub fn binary(dim: usize, indices: Vec<u32>) -> Result<Self> {
        SparseCode::new(dim, indices.into_iter().map(|i| (i, 1.0)).collect())
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum EncoderKind {
    /// One-hot at the nearest landmark.
    Vq,
    /// Binary code over all landmarks whose cosine passes the threshold.
    Gq { threshold: f64 },
}

fn check_dims(x: ArrayView1<'_, f64>, dict: &Dictionary) -> Result<()> {
    if x.len() != dict.dim() {
        return Err(SmtError::InvalidArgument(format!(
            "input dim {} vs dictionary dim {}",
            x.len(),
            dict.dim()
        )));
    }
    Ok(())
}

/// One-hot code at the best-matching landmark: maximal cosine for spherical
/// dictionaries (unit-norm input), minimal Euclidean distance otherwise.
/// Ties break to the lowest index; a zero input under a spherical dictionary
/// maps to index 0.
pub fn encode_vq(x: ArrayView1<'_, f64>, dict: &Dictionary) -> Result<SparseCode> {
    check_dims(x, dict)?;
    if dict.spherical && x.dot(&x).sqrt() <= NORMALIZE_EPS {
        return Ok(SparseCode::one_hot(dict.k(), 0));
    }
    let mut best = 0usize;
    let mut best_val = f64::NEG_INFINITY;
    for (j, c) in dict.elements.axis_iter(Axis(0)).enumerate() {
        let v = if dict.spherical {
            x.dot(&c)
        } else {
            let d = &x - &c;
            -d.dot(&d)
        };
        if v > best_val {
            best_val = v;
            best = j;
        }
    }
    Ok(SparseCode::one_hot(dict.k(), best))
}

/// Binary code with a 1 at every landmark whose cosine with `x` is at least
/// `threshold`. When nothing passes, falls back to the single best match so
/// no patch produces an empty code.
pub fn encode_gq(x: ArrayView1<'_, f64>, dict: &Dictionary, threshold: f64) -> Result<SparseCode> {
    check_dims(x, dict)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(SmtError::InvalidArgument(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    if !dict.spherical {
        return Err(SmtError::InvalidArgument(
            "thresholded encoding needs a spherical dictionary".into(),
        ));
    }
    let mut active = Vec::new();
    let mut best = 0usize;
    let mut best_cos = f64::NEG_INFINITY;
    for (j, c) in dict.elements.axis_iter(Axis(0)).enumerate() {
        let cos = x.dot(&c);
        if cos >= threshold {
            active.push(j as u32);
        }
        if cos > best_cos {
            best_cos = cos;
            best = j;
        }
    }
    if active.is_empty() {
        active.push(best as u32);
    }
    SparseCode::binary(dict.k(), active)
}

pub fn encode(x: ArrayView1<'_, f64>, dict: &Dictionary, kind: EncoderKind) -> Result<SparseCode> {
    match kind {
        EncoderKind::Vq => encode_vq(x, dict),
        EncoderKind::Gq { threshold } => encode_gq(x, dict, threshold),
    }
}

/// Encode rows that are already whitened and unit-normalized, using f32
/// matrix products against the dictionary. This is the throughput path; it
/// matches the per-patch encoders up to f32 rounding of near-ties.
pub fn encode_rows_f32(
    rows: &Array2<f32>,
    dict_f32: &Array2<f32>,
    kind: EncoderKind,
) -> Vec<SparseCode> {
    let k = dict_f32.nrows();
    let scores = rows.dot(&dict_f32.t()); // (n, k) cosines
    let mut out = Vec::with_capacity(rows.nrows());
    for score_row in scores.axis_iter(Axis(0)) {
        let code = match kind {
            EncoderKind::Vq => {
                let mut best = 0usize;
                let mut best_val = f32::NEG_INFINITY;
                for (j, &s) in score_row.iter().enumerate() {
                    if s > best_val {
                        best_val = s;
                        best = j;
                    }
                }
                SparseCode::one_hot(k, best)
            }
            EncoderKind::Gq { threshold } => {
                let t = threshold as f32;
                let mut active = Vec::new();
                let mut best = 0usize;
                let mut best_val = f32::NEG_INFINITY;
                for (j, &s) in score_row.iter().enumerate() {
                    if s >= t {
                        active.push(j as u32);
                    }
                    if s > best_val {
                        best_val = s;
                        best = j;
                    }
                }
                if active.is_empty() {
                    active.push(best as u32);
                }
                SparseCode {
                    dim: k,
                    entries: active.into_iter().map(|i| (i, 1.0)).collect(),
                }
            }
        };
        out.push(code);
    }
    out
}

/// Whiten (with contextual mean removal), L2-normalize, and encode every
/// cell of a patch grid.
pub fn batch_encode(
    grid: &PatchGrid,
    whitening: &WhiteningOperator,
    mean_radius: usize,
    dict: &Dictionary,
    kind: EncoderKind,
) -> Result<Vec<SparseCode>> {
    let rows = preprocess_grid(grid, whitening, mean_radius)?;
    let rows_f32 = rows.mapv(|v| v as f32);
    Ok(encode_rows_f32(&rows_f32, &dict.elements_f32(), kind))
}

/// Contextual-mean removal, whitening, and row-wise L2 normalization of a
/// patch grid. Rows of the result are unit vectors or zero.
pub fn preprocess_grid(
    grid: &PatchGrid,
    whitening: &WhiteningOperator,
    mean_radius: usize,
) -> Result<Array2<f64>> {
    let means = contextual_mean(grid, mean_radius)?;
    let mut whitened = whitening.whiten_batch(grid.patches.view(), means.view())?;
    l2_normalize_rows(&mut whitened);
    Ok(whitened)
}

const CODE_STREAM_MAGIC: &[u8; 4] = b"SMTC";
const CODE_STREAM_VERSION: u8 = 1;

/// Write binary codes in the compact run format: magic, version, dim, count,
/// then per code a u32 length and the sorted active indices.
pub fn write_code_stream<W: Write>(mut w: W, dim: usize, codes: &[SparseCode]) -> Result<W> {
    let io_err = |e: std::io::Error| SmtError::io("<code stream>", e);
    w.write_all(CODE_STREAM_MAGIC).map_err(io_err)?;
    w.write_all(&[CODE_STREAM_VERSION]).map_err(io_err)?;
    w.write_all(&(dim as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(codes.len() as u64).to_le_bytes()).map_err(io_err)?;
    for code in codes {
        if code.dim != dim {
            return Err(SmtError::InvalidArgument(format!(
                "code dim {} differs from stream dim {dim}",
                code.dim
            )));
        }
        w.write_all(&(code.nnz() as u32).to_le_bytes()).map_err(io_err)?;
        for &(i, _) in &code.entries {
            w.write_all(&i.to_le_bytes()).map_err(io_err)?;
        }
    }
    Ok(w)
}

/// Parse a code stream produced by [`write_code_stream`]. All indices are
/// validated against the stream dimension.
pub fn read_code_stream<R: Read>(mut r: R) -> Result<(usize, Vec<SparseCode>)> {
    let io_err = |e: std::io::Error| SmtError::io("<code stream>", e);
    let mut head = [0u8; 4 + 1 + 4 + 8];
    r.read_exact(&mut head).map_err(io_err)?;
    if &head[0..4] != CODE_STREAM_MAGIC {
        return Err(SmtError::Format("bad code stream magic".into()));
    }
    if head[4] != CODE_STREAM_VERSION {
        return Err(SmtError::Format(format!("unsupported code stream version {}", head[4])));
    }
    let dim = u32::from_le_bytes(head[5..9].try_into().unwrap()) as usize;
    let n = u64::from_le_bytes(head[9..17].try_into().unwrap());
    if n > u64::from(u32::MAX) {
        return Err(SmtError::Format(format!("implausible code count {n}")));
    }
    let mut codes = Vec::new();
    for _ in 0..n {
        let mut len_buf = [0u8; 4];
        r.read_exact(&mut len_buf).map_err(io_err)?;
        let nnz = u32::from_le_bytes(len_buf) as usize;
        if nnz > dim {
            return Err(SmtError::Format(format!("code has {nnz} entries, dim {dim}")));
        }
        let mut buf = vec![0u8; nnz * 4];
        r.read_exact(&mut buf).map_err(io_err)?;
        let mut indices = Vec::with_capacity(nnz);
        for chunk in buf.chunks_exact(4) {
            indices.push(u32::from_le_bytes(chunk.try_into().unwrap()));
        }
        let code = SparseCode::binary(dim, indices)
            .map_err(|e| SmtError::Format(format!("invalid code in stream: {e}")))?;
        codes.push(code);
    }
    Ok((dim, codes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{extract_patches, Image};
    use crate::dictionary::sample_dictionary;
    use crate::preprocess::fit_whitening;
    use ndarray::{array, Array1};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0f64..1.0));
        for mut r in m.axis_iter_mut(Axis(0)) {
            let norm = r.dot(&r).sqrt();
            r.mapv_inplace(|v| v / norm);
        }
        m
    }

    fn spherical_dict(k: usize, d: usize, seed: u64) -> Dictionary {
        Dictionary {
            elements: unit_rows(k, d, seed),
            spherical: true,
        }
    }

    #[test]
    fn vq_self_match() {
        let dict = spherical_dict(8, 5, 1);
        let x = dict.elements.row(3).to_owned();
        let code = encode_vq(x.view(), &dict).unwrap();
        assert_eq!(code.entries, vec![(3, 1.0)]);
    }

    #[test]
    fn vq_tie_breaks_to_lowest_index() {
        // columns 1 and 4 see the same cosine from x
        let mut el = Array2::zeros((6, 2));
        el.row_mut(0).assign(&array![-1.0, 0.0]);
        el.row_mut(1).assign(&array![1.0, 0.0]);
        el.row_mut(2).assign(&array![-1.0, 0.0]);
        el.row_mut(3).assign(&array![0.0, -1.0]);
        el.row_mut(4).assign(&array![0.0, 1.0]);
        el.row_mut(5).assign(&array![-1.0, 0.0]);
        let dict = Dictionary {
            elements: el,
            spherical: true,
        };
        let h = 0.5f64.sqrt();
        let x = array![h, h];
        let code = encode_vq(x.view(), &dict).unwrap();
        assert_eq!(code.entries, vec![(1, 1.0)]);
    }

    #[test]
    fn vq_matches_brute_force() {
        let dict = spherical_dict(16, 7, 5);
        for seed in 0..20u64 {
            let x = unit_rows(1, 7, 100 + seed).row(0).to_owned();
            let code = encode_vq(x.view(), &dict).unwrap();
            let brute = (0..16)
                .max_by(|&a, &b| {
                    x.dot(&dict.elements.row(a))
                        .total_cmp(&x.dot(&dict.elements.row(b)))
                })
                .unwrap();
            assert_eq!(code.entries[0].0 as usize, brute);
        }
    }

    #[test]
    fn vq_zero_input_reserved_index() {
        let dict = spherical_dict(4, 3, 2);
        let zero = Array1::zeros(3);
        let code = encode_vq(zero.view(), &dict).unwrap();
        assert_eq!(code.entries, vec![(0, 1.0)]);
    }

    #[test]
    fn vq_euclidean_for_plane_dictionary() {
        let dict = Dictionary {
            elements: array![[0.0, 0.0], [2.0, 2.0], [5.0, 0.0]],
            spherical: false,
        };
        let x = array![4.2, 0.3];
        let code = encode_vq(x.view(), &dict).unwrap();
        assert_eq!(code.entries[0].0, 2);
    }

    #[test]
    fn gq_self_match_passes_high_threshold() {
        let dict = spherical_dict(12, 6, 3);
        let x = dict.elements.row(7).to_owned();
        let code = encode_gq(x.view(), &dict, 0.99).unwrap();
        assert!(code.entries.iter().any(|&(i, _)| i == 7));
    }

    #[test]
    fn gq_fallback_single_best() {
        let dict = spherical_dict(10, 8, 4);
        let x = unit_rows(1, 8, 77).row(0).to_owned();
        // push the threshold above the best cosine
        let best_cos = (0..10)
            .map(|j| x.dot(&dict.elements.row(j)))
            .fold(f64::NEG_INFINITY, f64::max);
        let t = (best_cos + 0.01).min(0.999);
        let code = encode_gq(x.view(), &dict, t).unwrap();
        assert_eq!(code.nnz(), 1);
        let brute = (0..10)
            .max_by(|&a, &b| {
                x.dot(&dict.elements.row(a))
                    .total_cmp(&x.dot(&dict.elements.row(b)))
            })
            .unwrap();
        assert_eq!(code.entries[0].0 as usize, brute);
    }

    #[test]
    fn gq_matches_brute_force_active_set() {
        let dict = spherical_dict(32, 6, 9);
        for seed in 0..10u64 {
            let x = unit_rows(1, 6, 500 + seed).row(0).to_owned();
            let code = encode_gq(x.view(), &dict, 0.3).unwrap();
            let brute: Vec<u32> = (0..32u32)
                .filter(|&j| x.dot(&dict.elements.row(j as usize)) >= 0.3)
                .collect();
            if brute.is_empty() {
                assert_eq!(code.nnz(), 1);
            } else {
                let got: Vec<u32> = code.entries.iter().map(|&(i, _)| i).collect();
                assert_eq!(got, brute);
            }
        }
    }

    #[test]
    fn gq_rejects_bad_threshold() {
        let dict = spherical_dict(4, 3, 1);
        let x = unit_rows(1, 3, 0).row(0).to_owned();
        assert!(encode_gq(x.view(), &dict, 0.0).is_err());
        assert!(encode_gq(x.view(), &dict, 1.0).is_err());
    }

    #[test]
    fn batch_encode_preserves_count_and_matches_sequential() {
        let img = Image::new(28, 28, 1, (0..784).map(|i| (i * 83 % 256) as u8).collect());
        let grid = extract_patches(&img, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let train = Array2::from_shape_fn((800, 36), |_| rng.gen_range(-0.5f64..0.5));
        let whitening = fit_whitening(train.view(), 1e-2).unwrap();
        let dict = sample_dictionary(unit_rows(64, 36, 8).view(), 48, 3).unwrap();

        let codes = batch_encode(&grid, &whitening, 3, &dict, EncoderKind::Gq { threshold: 0.3 })
            .unwrap();
        assert_eq!(codes.len(), 529);

        // identical patches encode identically (flat regions exist in this image)
        let rows = preprocess_grid(&grid, &whitening, 3).unwrap();
        let rows_f32 = rows.mapv(|v| v as f32);
        let seq: Vec<SparseCode> = (0..rows.nrows())
            .map(|i| {
                encode_rows_f32(
                    &rows_f32.slice(ndarray::s![i..i + 1, ..]).to_owned(),
                    &dict.elements_f32(),
                    EncoderKind::Gq { threshold: 0.3 },
                )
                .remove(0)
            })
            .collect();
        assert_eq!(codes, seq);
    }

    #[test]
    fn code_stream_roundtrip() {
        let codes = vec![
            SparseCode::binary(10, vec![0, 3, 9]).unwrap(),
            SparseCode::one_hot(10, 5),
            SparseCode::binary(10, vec![2]).unwrap(),
        ];
        let buf = write_code_stream(Vec::new(), 10, &codes).unwrap();
        let (dim, back) = read_code_stream(buf.as_slice()).unwrap();
        assert_eq!(dim, 10);
        assert_eq!(back, codes);
    }

    #[test]
    fn code_stream_rejects_garbage() {
        assert!(read_code_stream(&b"nope"[..]).is_err());
        let mut buf = write_code_stream(Vec::new(), 4, &[SparseCode::one_hot(4, 2)]).unwrap();
        buf[0] = b'X';
        assert!(read_code_stream(buf.as_slice()).is_err());
        // truncated payload
        let buf = write_code_stream(Vec::new(), 4, &[SparseCode::one_hot(4, 2)]).unwrap();
        assert!(read_code_stream(&buf[..buf.len() - 2]).is_err());
    }

    #[test]
    fn sparse_code_validation() {
        assert!(SparseCode::new(4, vec![(0, 1.0), (0, 1.0)]).is_err()); // not increasing
        assert!(SparseCode::new(4, vec![(4, 1.0)]).is_err()); // out of range
        assert!(SparseCode::new(4, vec![(1, 0.0)]).is_err()); // nonpositive value
        assert!(SparseCode::new(4, vec![(1, 1.0), (3, 0.5)]).is_ok());
    }

    proptest! {
        #[test]
        fn gq_active_sets_monotone_in_threshold(seed in 0u64..500, t1 in 0.05f64..0.9, dt in 0.01f64..0.5) {
            let t2 = (t1 + dt).min(0.95);
            let dict = spherical_dict(24, 5, seed);
            let x = unit_rows(1, 5, seed ^ 0xabcd).row(0).to_owned();
            let c1 = encode_gq(x.view(), &dict, t1).unwrap();
            let c2 = encode_gq(x.view(), &dict, t2).unwrap();
            // fallback aside: only check when both thresholds had real hits
            let real_hit = |c: &SparseCode, t: f64| {
                c.entries.iter().all(|&(i, _)| x.dot(&dict.elements.row(i as usize)) >= t)
            };
            if real_hit(&c2, t2) {
                let a1: std::collections::HashSet<u32> = c1.entries.iter().map(|e| e.0).collect();
                for (i, _) in c2.entries {
                    prop_assert!(a1.contains(&i));
                }
            }
        }

        #[test]
        fn permuting_dictionary_permutes_codes(seed in 0u64..200) {
            let k = 12;
            let dict = spherical_dict(k, 4, seed);
            // reversal permutation
            let mut rev = Array2::zeros((k, 4));
            for j in 0..k {
                rev.row_mut(j).assign(&dict.elements.row(k - 1 - j));
            }
            let dict_rev = Dictionary { elements: rev, spherical: true };
            let x = unit_rows(1, 4, seed ^ 0x77).row(0).to_owned();

            let c = encode_gq(x.view(), &dict, 0.4).unwrap();
            let cr = encode_gq(x.view(), &dict_rev, 0.4).unwrap();
            let mapped: std::collections::BTreeSet<u32> =
                c.entries.iter().map(|&(i, _)| (k - 1 - i as usize) as u32).collect();
            let got: std::collections::BTreeSet<u32> = cr.entries.iter().map(|e| e.0).collect();
            // fallback can pick different tied indices under permutation; skip that case
            let real_hit = c.entries.iter().all(|&(i, _)| x.dot(&dict.elements.row(i as usize)) >= 0.4);
            if real_hit {
                prop_assert_eq!(mapped, got);
            }

            let v = encode_vq(x.view(), &dict).unwrap();
            let vr = encode_vq(x.view(), &dict_rev).unwrap();
            // unique argmax (no ties in random data): exact mapping
            prop_assert_eq!((k - 1 - v.entries[0].0 as usize) as u32, vr.entries[0].0);
        }

        #[test]
        fn vq_has_exactly_one_entry_gq_at_least_one(seed in 0u64..300) {
            let dict = spherical_dict(16, 6, seed);
            let x = unit_rows(1, 6, seed ^ 0xfeed).row(0).to_owned();
            prop_assert_eq!(encode_vq(x.view(), &dict).unwrap().nnz(), 1);
            prop_assert!(encode_gq(x.view(), &dict, 0.8).unwrap().nnz() >= 1);
        }
    }
}
