//! The image embedding pipeline: per-patch lifting and projection, spatial
//! average pooling, pointwise normalization, and the neighbor-pair stream
//! that feeds the co-occurrence statistics.

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{extract_patches, to_grayscale, Image};
use crate::dictionary::Dictionary;
use crate::error::{Result, SmtError};
use crate::preprocess::{l2_normalize, WhiteningOperator, NORMALIZE_EPS};
use crate::smt_core::SpectralEmbedding;
use crate::sparse::{encode, encode_rows_f32, preprocess_grid, EncoderKind, SparseCode};

/// Pipeline geometry and feature settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Patch side T; patches are T x T x channels.
    pub patch_side: usize,
    /// Co-occurrence pixel range d: patches within Chebyshev distance d on
    /// the grid are neighbors. Also the contextual-mean radius.
    pub cooccur_range: usize,
    pub encoder: EncoderKind,
    pub dict_size: usize,
    pub d_emb: usize,
    pub drop_first: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    /// Append horizontally flipped images when accumulating statistics.
    pub hflip_augment: bool,
    /// Convert inputs to grayscale before patch extraction.
    pub grayscale: bool,
    pub whitening_lambda_rel: f64,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_side == 0 {
            return Err(SmtError::Config("patch_side must be positive".into()));
        }
        if self.d_emb == 0 {
            return Err(SmtError::Config("d_emb must be positive".into()));
        }
        if self.pool_stride == 0 {
            return Err(SmtError::Config("pool_stride must be positive".into()));
        }
        if self.pool_kernel == 0 {
            return Err(SmtError::Config("pool_kernel must be positive".into()));
        }
        if self.dict_size == 0 {
            return Err(SmtError::Config("dict_size must be positive".into()));
        }
        Ok(())
    }
}

/// Pooled, pointwise-normalized image representation: a flattened
/// `(pool_rows, pool_cols, d_emb)` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbedding {
    pub data: Vec<f32>,
    pub pool_rows: usize,
    pub pool_cols: usize,
    pub d_emb: usize,
}

impl ImageEmbedding {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn slice(&self, row: usize, col: usize) -> &[f32] {
        let base = (row * self.pool_cols + col) * self.d_emb;
        &self.data[base..base + self.d_emb]
    }
}

/// Linear map from sparse codes to patch vectors. Implementations exploit
/// the sparsity: only active columns are touched.
pub trait CodeMap: Sync {
    fn output_dim(&self) -> usize;
    /// Accumulate the mapped code into `out` (caller zeroes it).
    fn map(&self, code: &SparseCode, out: &mut [f64]);
    /// Whether patch vectors are individually L2-normalized before pooling.
    fn normalize_each(&self) -> bool {
        true
    }
}

/// `beta = P alpha` via a `(K, d_emb)` transposed projection for contiguous
/// row gathers.
pub struct ProjectionMap {
    proj_t: Array2<f64>,
}

impl ProjectionMap {
    pub fn new(embedding: &SpectralEmbedding) -> Self {
        ProjectionMap {
            proj_t: embedding.projection.t().to_owned().as_standard_layout().into_owned(),
        }
    }
}

impl CodeMap for ProjectionMap {
    fn output_dim(&self) -> usize {
        self.proj_t.ncols()
    }

    fn map(&self, code: &SparseCode, out: &mut [f64]) {
        for &(i, v) in &code.entries {
            let row = self.proj_t.row(i as usize);
            let row = row.as_slice().expect("row-major projection");
            for (o, &p) in out.iter_mut().zip(row) {
                *o += v * p;
            }
        }
    }
}

/// The raw sparse code as a dense vector, pooled without per-patch
/// normalization.
pub struct RawCodeMap {
    pub k: usize,
}

impl CodeMap for RawCodeMap {
    fn output_dim(&self) -> usize {
        self.k
    }

    fn map(&self, code: &SparseCode, out: &mut [f64]) {
        for &(i, v) in &code.entries {
            out[i as usize] += v;
        }
    }

    fn normalize_each(&self) -> bool {
        false
    }
}

/// Any dense `(out_dim, K)` linear map of the code, e.g. code-space
/// whitening, stored transposed for row gathers.
pub struct LinearCodeMap {
    map_t: Array2<f64>,
}

impl LinearCodeMap {
    /// `matrix` is `(out_dim, K)`.
    pub fn new(matrix: &Array2<f64>) -> Self {
        LinearCodeMap {
            map_t: matrix.t().to_owned().as_standard_layout().into_owned(),
        }
    }
}

impl CodeMap for LinearCodeMap {
    fn output_dim(&self) -> usize {
        self.map_t.ncols()
    }

    fn map(&self, code: &SparseCode, out: &mut [f64]) {
        for &(i, v) in &code.entries {
            let row = self.map_t.row(i as usize);
            let row = row.as_slice().expect("row-major map");
            for (o, &p) in out.iter_mut().zip(row) {
                *o += v * p;
            }
        }
    }
}

/// Map every code of a grid and optionally normalize each patch vector.
pub fn map_grid_codes(codes: &[SparseCode], map: &dyn CodeMap) -> Array2<f64> {
    let d = map.output_dim();
    let mut out = Array2::zeros((codes.len(), d));
    for (code, mut row) in codes.iter().zip(out.rows_mut()) {
        let slice = row.as_slice_mut().expect("row-major output");
        map.map(code, slice);
        if map.normalize_each() {
            let norm = slice.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > NORMALIZE_EPS {
                for v in slice.iter_mut() {
                    *v /= norm;
                }
            } else {
                slice.fill(0.0);
            }
        }
    }
    out
}

/// Average-pool patch vectors over `(kernel, stride)` spatial windows, then
/// L2-normalize each pooled position.
pub fn average_pool_normalize(
    vectors: &Array2<f64>,
    grid_rows: usize,
    grid_cols: usize,
    kernel: usize,
    stride: usize,
) -> Result<ImageEmbedding> {
    if vectors.nrows() != grid_rows * grid_cols {
        return Err(SmtError::InvalidArgument(format!(
            "{} vectors for a {}x{} grid",
            vectors.nrows(),
            grid_rows,
            grid_cols
        )));
    }
    if kernel == 0 || stride == 0 || kernel > grid_rows || kernel > grid_cols {
        return Err(SmtError::InvalidArgument(format!(
            "pooling kernel {kernel} / stride {stride} invalid for {grid_rows}x{grid_cols} grid"
        )));
    }
    let d = vectors.ncols();
    let pool_rows = (grid_rows - kernel) / stride + 1;
    let pool_cols = (grid_cols - kernel) / stride + 1;
    let mut data = Vec::with_capacity(pool_rows * pool_cols * d);
    let count = (kernel * kernel) as f64;
    let mut acc = vec![0.0f64; d];
    for pr in 0..pool_rows {
        for pc in 0..pool_cols {
            acc.fill(0.0);
            for r in pr * stride..pr * stride + kernel {
                for c in pc * stride..pc * stride + kernel {
                    let row = vectors.row(r * grid_cols + c);
                    let row = row.as_slice().expect("row-major vectors");
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
            }
            let mut norm = 0.0;
            for a in acc.iter_mut() {
                *a /= count;
                norm += *a * *a;
            }
            norm = norm.sqrt();
            if norm > NORMALIZE_EPS {
                data.extend(acc.iter().map(|&v| (v / norm) as f32));
            } else {
                data.extend(std::iter::repeat(0.0f32).take(d));
            }
        }
    }
    Ok(ImageEmbedding {
        data,
        pool_rows,
        pool_cols,
        d_emb: d,
    })
}

/// The lifting front of the pipeline: preprocessing plus dictionary, without
/// a projection. The ablation baselines pool codes straight from here.
pub struct EncodingPipeline {
    pub config: PipelineConfig,
    pub whitening: WhiteningOperator,
    pub dictionary: Dictionary,
    dict_f32: Array2<f32>,
}

impl EncodingPipeline {
    pub fn new(
        config: PipelineConfig,
        whitening: WhiteningOperator,
        dictionary: Dictionary,
    ) -> Result<Self> {
        config.validate()?;
        if dictionary.dim() != whitening.dim {
            return Err(SmtError::State(format!(
                "dictionary dim {} does not match whitening dim {}",
                dictionary.dim(),
                whitening.dim
            )));
        }
        if dictionary.k() != config.dict_size {
            return Err(SmtError::State(format!(
                "dictionary has {} landmarks, config says {}",
                dictionary.k(),
                config.dict_size
            )));
        }
        let dict_f32 = dictionary.elements_f32();
        Ok(EncodingPipeline {
            config,
            whitening,
            dictionary,
            dict_f32,
        })
    }

    fn to_pipeline_colorspace(&self, image: &Image) -> Result<Image> {
        if self.config.grayscale && image.channels == 3 {
            to_grayscale(image)
        } else {
            Ok(image.clone())
        }
    }

    pub fn grid_side(&self, image: &Image) -> usize {
        image.height - self.config.patch_side + 1
    }

    /// Encode every patch of an image with the fitted whitening + dictionary.
    pub fn encode_image(&self, image: &Image) -> Result<Vec<SparseCode>> {
        let image = self.to_pipeline_colorspace(image)?;
        let grid = extract_patches(&image, self.config.patch_side)?;
        let rows = preprocess_grid(&grid, &self.whitening, self.config.cooccur_range)?;
        let rows_f32 = rows.mapv(|v| v as f32);
        Ok(encode_rows_f32(&rows_f32, &self.dict_f32, self.config.encoder))
    }

    /// Pool an image's codes through an arbitrary code map using the
    /// configured pooling geometry.
    pub fn embed_image_with_map(&self, image: &Image, map: &dyn CodeMap) -> Result<ImageEmbedding> {
        let codes = self.encode_image(image)?;
        let side = self.grid_side(&self.to_pipeline_colorspace(image)?);
        let vectors = map_grid_codes(&codes, map);
        average_pool_normalize(
            &vectors,
            side,
            side,
            self.config.pool_kernel,
            self.config.pool_stride,
        )
    }
}

/// The fitted pipeline: encoding front plus the solved projection.
pub struct FittedPipeline {
    pub encoding: EncodingPipeline,
    pub embedding: SpectralEmbedding,
    projection_map: ProjectionMap,
}

impl FittedPipeline {
    pub fn assemble(
        config: PipelineConfig,
        whitening: WhiteningOperator,
        dictionary: Dictionary,
        embedding: SpectralEmbedding,
    ) -> Result<Self> {
        let encoding = EncodingPipeline::new(config, whitening, dictionary)?;
        if embedding.k() != encoding.dictionary.k() {
            return Err(SmtError::State(format!(
                "projection has {} columns but dictionary has {} landmarks",
                embedding.k(),
                encoding.dictionary.k()
            )));
        }
        if embedding.d_emb() != encoding.config.d_emb {
            return Err(SmtError::State(format!(
                "projection dim {} does not match configured d_emb {}",
                embedding.d_emb(),
                encoding.config.d_emb
            )));
        }
        let projection_map = ProjectionMap::new(&embedding);
        Ok(FittedPipeline {
            encoding,
            embedding,
            projection_map,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.encoding.config
    }

    /// `l2_normalize(P f(whiten-normalize(patch)))` for one patch vector with
    /// its (contextual) mean.
    pub fn embed_patch(
        &self,
        patch: ArrayView1<'_, f64>,
        mean: ArrayView1<'_, f64>,
    ) -> Result<Array1<f64>> {
        let whitened = self.encoding.whitening.whiten(patch, mean)?;
        let unit = l2_normalize(whitened.view());
        let code = encode(unit.view(), &self.encoding.dictionary, self.encoding.config.encoder)?;
        Ok(self.embed_code(&code))
    }

    /// `l2_normalize(P alpha)`.
    pub fn embed_code(&self, code: &SparseCode) -> Array1<f64> {
        let mut out = vec![0.0f64; self.encoding.config.d_emb];
        self.projection_map.map(code, &mut out);
        l2_normalize(Array1::from_vec(out).view())
    }

    pub fn encode_image(&self, image: &Image) -> Result<Vec<SparseCode>> {
        self.encoding.encode_image(image)
    }

    /// Full image representation: encode, project+normalize each patch,
    /// average-pool, pointwise normalize, flatten.
    pub fn embed_image(&self, image: &Image) -> Result<ImageEmbedding> {
        self.encoding.embed_image_with_map(image, &self.projection_map)
    }
}

/// Embed a batch of images in parallel into one `(n, z_len)` f32 matrix.
/// Ordering and content are independent of the worker count.
pub fn embed_dataset<F>(images: &[Image], embed_one: F) -> Result<Array2<f32>>
where
    F: Fn(&Image) -> Result<ImageEmbedding> + Sync,
{
    use rayon::prelude::*;
    if images.is_empty() {
        return Err(SmtError::InvalidArgument("no images to embed".into()));
    }
    let embeddings: Vec<ImageEmbedding> = images
        .par_iter()
        .map(|img| embed_one(img))
        .collect::<Result<Vec<_>>>()?;
    let z_len = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != z_len) {
        return Err(SmtError::InvalidArgument(
            "images produced embeddings of different lengths".into(),
        ));
    }
    let mut out = Array2::zeros((images.len(), z_len));
    for (mut row, emb) in out.rows_mut().into_iter().zip(&embeddings) {
        for (dst, &src) in row.iter_mut().zip(&emb.data) {
            *dst = src;
        }
    }
    Ok(out)
}

/// One encode sweep, several code maps: returns one `(n, z_len)` matrix per
/// map. The expensive dictionary scoring happens once per image.
pub fn embed_dataset_with_maps(
    images: &[Image],
    encoding: &EncodingPipeline,
    maps: &[&dyn CodeMap],
) -> Result<Vec<Array2<f32>>> {
    use rayon::prelude::*;
    if images.is_empty() || maps.is_empty() {
        return Err(SmtError::InvalidArgument("no images or maps".into()));
    }
    let per_image: Vec<Result<Vec<ImageEmbedding>>> = images
        .par_iter()
        .map(|img| {
            let codes = encoding.encode_image(img)?;
            let side = encoding.grid_side(img) ;
            maps.iter()
                .map(|map| {
                    let vectors = map_grid_codes(&codes, *map);
                    average_pool_normalize(
                        &vectors,
                        side,
                        side,
                        encoding.config.pool_kernel,
                        encoding.config.pool_stride,
                    )
                })
                .collect()
        })
        .collect();
    let mut out: Vec<Array2<f32>> = Vec::new();
    for (i, row) in per_image.into_iter().enumerate() {
        let row = row?;
        if out.is_empty() {
            for emb in &row {
                out.push(Array2::zeros((images.len(), emb.len())));
            }
        }
        for (m, emb) in row.into_iter().enumerate() {
            if emb.len() != out[m].ncols() {
                return Err(SmtError::InvalidArgument(
                    "images produced embeddings of different lengths".into(),
                ));
            }
            for (dst, src) in out[m].row_mut(i).iter_mut().zip(&emb.data) {
                *dst = *src;
            }
        }
    }
    Ok(out)
}

/// Per-position concatenation of a color and a grayscale pipeline embedding,
/// color first. Both pipelines must produce the same pooled geometry.
pub fn embed_image_concat(
    image: &Image,
    color: &FittedPipeline,
    gray: &FittedPipeline,
) -> Result<ImageEmbedding> {
    let a = color.embed_image(image)?;
    let b = gray.embed_image(image)?;
    if (a.pool_rows, a.pool_cols) != (b.pool_rows, b.pool_cols) {
        return Err(SmtError::InvalidArgument(format!(
            "pooled geometries differ: {}x{} vs {}x{}",
            a.pool_rows, a.pool_cols, b.pool_rows, b.pool_cols
        )));
    }
    let d = a.d_emb + b.d_emb;
    let mut data = Vec::with_capacity(a.pool_rows * a.pool_cols * d);
    for r in 0..a.pool_rows {
        for c in 0..a.pool_cols {
            data.extend_from_slice(a.slice(r, c));
            data.extend_from_slice(b.slice(r, c));
        }
    }
    Ok(ImageEmbedding {
        data,
        pool_rows: a.pool_rows,
        pool_cols: a.pool_cols,
        d_emb: d,
    })
}

/// All unordered grid index pairs within Chebyshev range `d` (excluding the
/// cell itself).
pub fn neighbor_pairs(grid_rows: usize, grid_cols: usize, d: usize) -> Vec<(u32, u32)> {
    let mut pairs = Vec::new();
    if d == 0 {
        return pairs;
    }
    let idx = |r: usize, c: usize| (r * grid_cols + c) as u32;
    for r in 0..grid_rows {
        for c in 0..grid_cols {
            // only offsets that point "forward" so each unordered pair
            // appears exactly once
            for dr in 0..=d {
                let r2 = r + dr;
                if r2 >= grid_rows {
                    break;
                }
                let c_lo = if dr == 0 { c + 1 } else { c.saturating_sub(d) };
                for c2 in c_lo..=(c + d).min(grid_cols - 1) {
                    pairs.push((idx(r, c), idx(r2, c2)));
                }
            }
        }
    }
    pairs
}

/// Subsample up to `budget` of `0..n` without replacement; everything when
/// the budget covers it. Deterministic for a fixed seed.
pub fn sample_indices(n: usize, budget: usize, seed: u64) -> Vec<u32> {
    if n <= budget {
        return (0..n as u32).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<u32> = (0..n as u32).collect();
    // partial Fisher-Yates: only the first `budget` slots are needed
    for i in 0..budget {
        let j = rng.gen_range(i..idx.len());
        idx.swap(i, j);
    }
    idx.truncate(budget);
    idx
}

/// Subsample up to `budget` pairs without replacement; the full set when it
/// fits the budget. Deterministic for a fixed seed.
pub fn sample_pairs(pairs: &[(u32, u32)], budget: usize, seed: u64) -> Vec<(u32, u32)> {
    sample_indices(pairs.len(), budget, seed)
        .into_iter()
        .map(|i| pairs[i as usize])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::sample_dictionary;
    use crate::preprocess::fit_whitening;
    use crate::smt_core::{solve_embedding, AccumulationMode, CooccurrenceStats};
    use approx::assert_abs_diff_eq;
    use ndarray::Axis;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_pipeline(seed: u64) -> FittedPipeline {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 9; // T=3, single channel
        let train = Array2::from_shape_fn((600, dim), |_| rng.gen_range(-0.5f64..0.5));
        let whitening = fit_whitening(train.view(), 1e-2).unwrap();
        let mut unit = Array2::from_shape_fn((64, dim), |_| rng.gen_range(-1.0f64..1.0));
        for mut r in unit.axis_iter_mut(Axis(0)) {
            let n = r.dot(&r).sqrt();
            r.mapv_inplace(|v| v / n);
        }
        let dictionary = sample_dictionary(unit.view(), 32, seed).unwrap();
        let mut stats = CooccurrenceStats::new(32, AccumulationMode::Pairwise);
        for _ in 0..600 {
            let a = SparseCode::one_hot(32, rng.gen_range(0..32));
            let b = SparseCode::one_hot(32, rng.gen_range(0..32));
            stats.accumulate_pair(&a, &b).unwrap();
        }
        let embedding = solve_embedding(&stats, 6, 0, 1e-9).unwrap();
        FittedPipeline::assemble(
            PipelineConfig {
                patch_side: 3,
                cooccur_range: 1,
                encoder: EncoderKind::Vq,
                dict_size: 32,
                d_emb: 6,
                drop_first: 0,
                pool_kernel: 2,
                pool_stride: 2,
                hflip_augment: false,
                grayscale: false,
                whitening_lambda_rel: 1e-2,
            },
            whitening,
            dictionary,
            embedding,
        )
        .unwrap()
    }

    fn test_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, 1, (0..h * w).map(|_| rng.gen_range(0..=255)).collect())
    }

    #[test]
    fn embed_code_is_normalized_projection_column() {
        let p = toy_pipeline(1);
        let code = SparseCode::one_hot(32, 11);
        let beta = p.embed_code(&code);
        let col = p.embedding.projection.column(11).to_owned();
        let expected = l2_normalize(col.view());
        for (a, b) in beta.iter().zip(expected.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn embed_code_sums_columns_for_multi_hot() {
        let p = toy_pipeline(2);
        let code = SparseCode::binary(32, vec![3, 17]).unwrap();
        let beta = p.embed_code(&code);
        let sum = &p.embedding.projection.column(3) + &p.embedding.projection.column(17);
        let expected = l2_normalize(sum.view());
        for (a, b) in beta.iter().zip(expected.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn identical_patches_embed_identically() {
        let p = toy_pipeline(3);
        let patch = Array1::from_shape_fn(9, |i| i as f64 / 10.0);
        let mean = Array1::zeros(9);
        let a = p.embed_patch(patch.view(), mean.view()).unwrap();
        let b = p.embed_patch(patch.view(), mean.view()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn global_pooling_gives_single_position() {
        let p = toy_pipeline(4);
        let img = test_image(8, 8, 9); // grid 6x6
        let codes = p.encode_image(&img).unwrap();
        let vectors = map_grid_codes(&codes, &p.projection_map);
        let z = average_pool_normalize(&vectors, 6, 6, 6, 6).unwrap();
        assert_eq!((z.pool_rows, z.pool_cols), (1, 1));
        assert_eq!(z.len(), 6);
        let norm: f32 = z.data.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5 || norm < 1e-6);
    }

    #[test]
    fn identity_pooling_is_per_patch_grid() {
        let p = toy_pipeline(5);
        let img = test_image(7, 7, 2); // grid 5x5
        let codes = p.encode_image(&img).unwrap();
        let vectors = map_grid_codes(&codes, &p.projection_map);
        let z = average_pool_normalize(&vectors, 5, 5, 1, 1).unwrap();
        assert_eq!((z.pool_rows, z.pool_cols), (5, 5));
        // with unit patch vectors, identity pooling reproduces them
        for i in 0..25 {
            let slice = z.slice(i / 5, i % 5);
            for (a, &b) in slice.iter().zip(vectors.row(i)) {
                assert_abs_diff_eq!(*a as f64, b, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn constant_grid_pools_to_normalized_beta() {
        let p = toy_pipeline(6);
        // 4x4 grid of one constant beta
        let beta = p.embed_code(&SparseCode::one_hot(32, 7));
        let mut vectors = Array2::zeros((16, 6));
        for mut row in vectors.rows_mut() {
            row.assign(&beta);
        }
        let z = average_pool_normalize(&vectors, 4, 4, 2, 2).unwrap();
        assert_eq!((z.pool_rows, z.pool_cols), (2, 2));
        let expected = l2_normalize(beta.view());
        for r in 0..2 {
            for c in 0..2 {
                for (a, b) in z.slice(r, c).iter().zip(expected.iter()) {
                    assert_abs_diff_eq!(*a as f64, *b, epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn composite_pooling_equals_manual_average_of_identity_pooling() {
        let p = toy_pipeline(7);
        let img = test_image(10, 10, 5); // grid 8x8
        let direct = {
            let codes = p.encode_image(&img).unwrap();
            let vectors = map_grid_codes(&codes, &p.projection_map);
            average_pool_normalize(&vectors, 8, 8, 4, 4).unwrap()
        };
        let identity = {
            let codes = p.encode_image(&img).unwrap();
            let vectors = map_grid_codes(&codes, &p.projection_map);
            average_pool_normalize(&vectors, 8, 8, 1, 1).unwrap()
        };
        // manual 4x4/4 pooling over the identity grid, then normalize
        for pr in 0..2 {
            for pc in 0..2 {
                let mut acc = vec![0.0f64; 6];
                for r in pr * 4..pr * 4 + 4 {
                    for c in pc * 4..pc * 4 + 4 {
                        for (a, &v) in acc.iter_mut().zip(identity.slice(r, c)) {
                            *a += f64::from(v);
                        }
                    }
                }
                let arr = Array1::from_vec(acc);
                let manual = l2_normalize(arr.view());
                for (a, &b) in manual.iter().zip(direct.slice(pr, pc)) {
                    assert_abs_diff_eq!(*a, f64::from(b), epsilon = 1e-5);
                }
            }
        }
    }

    #[test]
    fn pooled_slices_are_unit_or_zero() {
        let p = toy_pipeline(8);
        let img = test_image(9, 9, 11);
        let z = p.embed_image(&img).unwrap();
        for r in 0..z.pool_rows {
            for c in 0..z.pool_cols {
                let n: f32 = z.slice(r, c).iter().map(|v| v * v).sum::<f32>().sqrt();
                assert!(n < 1e-6 || (n - 1.0).abs() < 1e-5, "norm {n}");
            }
        }
    }

    #[test]
    fn concat_is_color_then_gray_and_doubles_length() {
        let color = toy_concat_pipeline(false);
        let gray = toy_concat_pipeline(true);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let img = Image::new(
            8,
            8,
            3,
            (0..8 * 8 * 3).map(|_| rng.gen_range(0..=255)).collect(),
        );
        let z = embed_image_concat(&img, &color, &gray).unwrap();
        let zc = color.embed_image(&img).unwrap();
        let zg = gray.embed_image(&img).unwrap();
        assert_eq!(z.len(), zc.len() + zg.len());
        assert_eq!(z.d_emb, zc.d_emb + zg.d_emb);
        // color block first at every position
        for r in 0..z.pool_rows {
            for c in 0..z.pool_cols {
                assert_eq!(&z.slice(r, c)[..zc.d_emb], zc.slice(r, c));
                assert_eq!(&z.slice(r, c)[zc.d_emb..], zg.slice(r, c));
            }
        }
        // stability across calls
        let z2 = embed_image_concat(&img, &color, &gray).unwrap();
        assert_eq!(z, z2);
    }

    fn toy_concat_pipeline(gray: bool) -> FittedPipeline {
        let mut rng = ChaCha8Rng::seed_from_u64(if gray { 40 } else { 41 });
        let ch = if gray { 1 } else { 3 };
        let dim = 4 * ch; // T=2
        let train = Array2::from_shape_fn((400, dim), |_| rng.gen_range(-0.5f64..0.5));
        let whitening = fit_whitening(train.view(), 1e-2).unwrap();
        let mut unit = Array2::from_shape_fn((40, dim), |_| rng.gen_range(-1.0f64..1.0));
        for mut r in unit.axis_iter_mut(Axis(0)) {
            let n = r.dot(&r).sqrt();
            r.mapv_inplace(|v| v / n);
        }
        let dictionary = sample_dictionary(unit.view(), 16, 1).unwrap();
        let mut stats = CooccurrenceStats::new(16, AccumulationMode::Pairwise);
        for _ in 0..300 {
            let a = SparseCode::one_hot(16, rng.gen_range(0..16));
            let b = SparseCode::one_hot(16, rng.gen_range(0..16));
            stats.accumulate_pair(&a, &b).unwrap();
        }
        let embedding = solve_embedding(&stats, 5, 0, 1e-9).unwrap();
        FittedPipeline::assemble(
            PipelineConfig {
                patch_side: 2,
                cooccur_range: 1,
                encoder: EncoderKind::Vq,
                dict_size: 16,
                d_emb: 5,
                drop_first: 0,
                pool_kernel: 3,
                pool_stride: 2,
                hflip_augment: false,
                grayscale: gray,
                whitening_lambda_rel: 1e-2,
            },
            whitening,
            dictionary,
            embedding,
        )
        .unwrap()
    }

    #[test]
    fn neighbor_pair_counts() {
        // 3x3 grid, d=1: 12 lattice edges + 8 diagonal pairs = 20
        assert_eq!(neighbor_pairs(3, 3, 1).len(), 20);
        assert_eq!(neighbor_pairs(3, 3, 0).len(), 0);
        // d >= side-1 makes every pair a neighbor: C(9, 2)
        assert_eq!(neighbor_pairs(3, 3, 2).len(), 36);
        assert_eq!(neighbor_pairs(3, 3, 99).len(), 36);
    }

    #[test]
    fn neighbor_pairs_unique_and_in_range() {
        let pairs = neighbor_pairs(5, 4, 2);
        let mut seen = std::collections::HashSet::new();
        for &(a, b) in &pairs {
            assert!(a < b, "ordered within pair");
            assert!(seen.insert((a, b)), "duplicate pair ({a}, {b})");
            let (ra, ca) = (a / 4, a % 4);
            let (rb, cb) = (b / 4, b % 4);
            assert!(ra.abs_diff(rb as u32) <= 2 && ca.abs_diff(cb as u32) <= 2);
        }
        // brute force count
        let mut brute = 0;
        for p in 0..20u32 {
            for q in (p + 1)..20 {
                let (rp, cp) = (p / 4, p % 4);
                let (rq, cq) = (q / 4, q % 4);
                if rp.abs_diff(rq) <= 2 && cp.abs_diff(cq) <= 2 {
                    brute += 1;
                }
            }
        }
        assert_eq!(pairs.len(), brute);
    }

    #[test]
    fn pair_sampling_deterministic_within_budget() {
        let pairs = neighbor_pairs(6, 6, 2);
        let a = sample_pairs(&pairs, 40, 7);
        let b = sample_pairs(&pairs, 40, 7);
        assert_eq!(a, b);
        assert_eq!(a.len(), 40);
        let all = sample_pairs(&pairs, pairs.len() + 10, 7);
        assert_eq!(all, pairs);
        // sampled pairs are a subset
        let set: std::collections::HashSet<(u32, u32)> = pairs.iter().copied().collect();
        assert!(a.iter().all(|p| set.contains(p)));
        // no duplicates
        let uniq: std::collections::HashSet<(u32, u32)> = a.iter().copied().collect();
        assert_eq!(uniq.len(), a.len());
    }
}
