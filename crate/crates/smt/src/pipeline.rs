//! End-to-end experiment orchestration with content-addressed stage caching:
//! ingest -> whiten -> dictionary -> statistics -> solve -> embed -> eval.
//!
//! Every stage artifact is a file named `<stage>-<hash12>` under the output
//! directory, where the hash chains the dataset bytes and every upstream
//! parameter that can influence the artifact. Stages can be driven
//! individually (the CLI subcommands do) or all at once via
//! [`PipelineRunner::run`]; reruns with an unchanged configuration are pure
//! cache hits and reproduce reports byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{
    read_artifact_file, read_embedding_matrix, write_artifact_file, write_embedding_matrix,
    Artifact, ConfigHash, EmbeddingSidecar,
};
use crate::config::{DatasetKind, DictionaryMethod, ExperimentConfig};
use crate::dataset::{
    extract_patches, horizontal_flip, load_cifar_binary, load_mnist_idx, to_grayscale,
    CifarVariant, Image, ImageDataset, Split,
};
use crate::dictionary::{kmeans_fit, sample_dictionary, Dictionary};
use crate::error::{Result, SmtError};
use crate::evaluation::{knn_accuracy, KnnConfig};
use crate::preprocess::{contextual_mean, fit_whitening_from_moment, WhiteningOperator};
use crate::representation::{
    embed_dataset, neighbor_pairs, sample_indices, FittedPipeline, PipelineConfig,
};
use crate::smt_core::{solve_embedding, AccumulationMode, CooccurrenceStats, SpectralEmbedding};
use crate::sparse::{encode_rows_f32, preprocess_grid, SparseCode};

/// Images processed per parallel batch during the streaming passes. Batches
/// are merged in index order so the result is independent of thread count.
const BATCH: usize = 32;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub dataset: String,
    pub config_hash: String,
    pub stages: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
    /// Top-1 accuracy per evaluated k.
    pub top1_by_k: BTreeMap<usize, f64>,
    pub best_k: usize,
    pub top1: f64,
    pub config_text: String,
}

/// Wall-clock seconds per stage. Kept out of [`ExperimentReport`] so reports
/// stay bit-identical across reruns.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub seconds: BTreeMap<String, f64>,
    pub cached: BTreeMap<String, bool>,
}

/// The hash chain tying every stage to the dataset bytes and its upstream
/// parameters.
#[derive(Debug, Clone)]
pub struct StageChain {
    pub ingest: ConfigHash,
    pub whiten: ConfigHash,
    pub dict: ConfigHash,
    pub stats: ConfigHash,
    pub smt: ConfigHash,
    pub embed_train: ConfigHash,
    pub embed_test: ConfigHash,
}

impl StageChain {
    pub fn embed(&self, split: Split) -> &ConfigHash {
        match split {
            Split::Train => &self.embed_train,
            Split::Test => &self.embed_test,
        }
    }

    pub fn as_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("ingest".into(), self.ingest.hex());
        m.insert("whiten".into(), self.whiten.hex());
        m.insert("dict".into(), self.dict.hex());
        m.insert("stats".into(), self.stats.hex());
        m.insert("smt".into(), self.smt.hex());
        m.insert("embed-train".into(), self.embed_train.hex());
        m.insert("embed-test".into(), self.embed_test.hex());
        m
    }
}

fn dataset_files(cfg: &ExperimentConfig, split: Split) -> Vec<PathBuf> {
    let root = cfg.resolved_data_root();
    match cfg.dataset {
        DatasetKind::Mnist => {
            let dir = root.join("mnist");
            match split {
                Split::Train => vec![
                    dir.join("train-images-idx3-ubyte"),
                    dir.join("train-labels-idx1-ubyte"),
                ],
                Split::Test => vec![
                    dir.join("t10k-images-idx3-ubyte"),
                    dir.join("t10k-labels-idx1-ubyte"),
                ],
            }
        }
        DatasetKind::Cifar10 => {
            let dir = root.join("cifar10");
            match split {
                Split::Train => (1..=5)
                    .map(|i| dir.join(format!("data_batch_{i}.bin")))
                    .collect(),
                Split::Test => vec![dir.join("test_batch.bin")],
            }
        }
        DatasetKind::Cifar100 => {
            let dir = root.join("cifar100");
            match split {
                Split::Train => vec![dir.join("train.bin")],
                Split::Test => vec![dir.join("test.bin")],
            }
        }
    }
}

pub fn load_split(cfg: &ExperimentConfig, split: Split) -> Result<ImageDataset> {
    let files = dataset_files(cfg, split);
    for f in &files {
        if !f.exists() {
            return Err(SmtError::MissingDependency {
                stage: "ingest".into(),
                missing: f.display().to_string(),
            });
        }
    }
    match cfg.dataset {
        DatasetKind::Mnist => load_mnist_idx(&files[0], &files[1], split),
        DatasetKind::Cifar10 => load_cifar_binary(&files, CifarVariant::Cifar10, split),
        DatasetKind::Cifar100 => load_cifar_binary(&files, CifarVariant::Cifar100, split),
    }
}

/// Hash the raw dataset bytes of both splits.
fn ingest_hash(cfg: &ExperimentConfig) -> Result<ConfigHash> {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for split in [Split::Train, Split::Test] {
        for f in dataset_files(cfg, split) {
            if !f.exists() {
                return Err(SmtError::MissingDependency {
                    stage: "ingest".into(),
                    missing: f.display().to_string(),
                });
            }
            let bytes = std::fs::read(&f).map_err(|e| SmtError::io(&f, e))?;
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
    }
    h.update(cfg.dataset.name().as_bytes());
    Ok(ConfigHash(h.finalize().into()))
}

/// Derive a per-image RNG seed that is stable across runs and batch sizes.
fn image_seed(global: u64, stage: u64, image_index: usize) -> u64 {
    // splitmix64 over the combined key
    let mut z = global
        .wrapping_add(stage.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add((image_index as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// The training sweep: original images followed, when flip augmentation is
/// on, by their horizontal flips.
fn training_views<'a>(images: &'a [Image], cfg: &PipelineConfig) -> Vec<(usize, bool, &'a Image)> {
    let mut out = Vec::with_capacity(images.len() * 2);
    for (i, img) in images.iter().enumerate() {
        out.push((i, false, img));
    }
    if cfg.hflip_augment {
        for (i, img) in images.iter().enumerate() {
            out.push((images.len() + i, true, img));
        }
    }
    out
}

fn view_image(cfg: &PipelineConfig, flipped: bool, img: &Image) -> Result<Image> {
    let base = if cfg.grayscale && img.channels == 3 {
        to_grayscale(img)?
    } else {
        img.clone()
    };
    Ok(if flipped { horizontal_flip(&base) } else { base })
}

/// Deterministically subsample mean-removed patches and accumulate their
/// second moment.
fn whitening_moment(
    images: &[Image],
    cfg: &PipelineConfig,
    fit_sample: usize,
    seed: u64,
) -> Result<(Array2<f64>, usize)> {
    use rand::Rng;
    use rand::SeedableRng;
    let views = training_views(images, cfg);
    let probe = view_image(cfg, false, &images[0])?;
    let grid = extract_patches(&probe, cfg.patch_side)?;
    let per_image = grid.len();
    let total = per_image * views.len();
    let keep_prob = (fit_sample as f64 / total as f64).min(1.0);

    let dim = grid.patch_dim();
    let mut moment = Array2::<f64>::zeros((dim, dim));
    let mut count = 0usize;
    for chunk in views.chunks(BATCH) {
        let partials: Vec<Result<(Array2<f64>, usize)>> = chunk
            .par_iter()
            .map(|&(vi, flipped, img)| {
                let image = view_image(cfg, flipped, img)?;
                let grid = extract_patches(&image, cfg.patch_side)?;
                let means = contextual_mean(&grid, cfg.cooccur_range)?;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(image_seed(seed, 1, vi));
                let mut rows: Vec<f64> = Vec::new();
                let mut kept = 0usize;
                for p in 0..grid.len() {
                    if rng.gen::<f64>() < keep_prob {
                        kept += 1;
                        for (a, b) in grid.patches.row(p).iter().zip(means.row(p)) {
                            rows.push(a - b);
                        }
                    }
                }
                if kept == 0 {
                    return Ok((Array2::zeros((dim, dim)), 0));
                }
                let x = Array2::from_shape_vec((kept, dim), rows).expect("row count");
                Ok((x.t().dot(&x), kept))
            })
            .collect();
        for p in partials {
            let (m, n) = p?;
            if n > 0 {
                moment += &m;
                count += n;
            }
        }
    }
    Ok((moment, count))
}

/// Deterministically subsample preprocessed (whitened, unit) patches for
/// dictionary fitting.
fn dictionary_sample(
    images: &[Image],
    cfg: &PipelineConfig,
    whitening: &WhiteningOperator,
    fit_sample: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    use rand::Rng;
    use rand::SeedableRng;
    let views = training_views(images, cfg);
    let probe = view_image(cfg, false, &images[0])?;
    let per_image = extract_patches(&probe, cfg.patch_side)?.len();
    let total = per_image * views.len();
    let keep_prob = (fit_sample as f64 / total as f64).min(1.0);

    let dim = whitening.dim;
    let mut rows: Vec<f64> = Vec::new();
    for chunk in views.chunks(BATCH) {
        let partials: Vec<Result<Vec<f64>>> = chunk
            .par_iter()
            .map(|&(vi, flipped, img)| {
                let image = view_image(cfg, flipped, img)?;
                let grid = extract_patches(&image, cfg.patch_side)?;
                let unit = preprocess_grid(&grid, whitening, cfg.cooccur_range)?;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(image_seed(seed, 2, vi));
                let mut out = Vec::new();
                for p in 0..grid.len() {
                    if rng.gen::<f64>() < keep_prob {
                        out.extend(unit.row(p).iter());
                    }
                }
                Ok(out)
            })
            .collect();
        for p in partials {
            rows.extend(p?);
        }
    }
    let n = rows.len() / dim;
    if n == 0 {
        return Err(SmtError::InvalidArgument("dictionary sample came up empty".into()));
    }
    Ok(Array2::from_shape_vec((n, dim), rows).expect("row count"))
}

/// Stream the training sweep once, accumulating the second moment of every
/// code and the sampled neighbor differences (pairwise or aggregated mode).
pub fn accumulate_statistics(
    images: &[Image],
    cfg: &ExperimentConfig,
    whitening: &WhiteningOperator,
    dictionary: &Dictionary,
) -> Result<CooccurrenceStats> {
    let pc = &cfg.pipeline;
    if cfg.stats_mode == AccumulationMode::SecondOrder {
        return Err(SmtError::InvalidArgument(
            "second_order accumulation needs caller-supplied weights and has no image-pipeline driver"
                .into(),
        ));
    }
    let views = training_views(images, pc);
    let probe = view_image(pc, false, &images[0])?;
    let side = probe.height - pc.patch_side + 1;
    let all_pairs = neighbor_pairs(side, side, pc.cooccur_range);
    if all_pairs.is_empty() {
        return Err(SmtError::InvalidArgument(
            "co-occurrence range produces no neighbor pairs".into(),
        ));
    }
    // neighbor lists per cell for aggregated mode
    let neighbors_of: Vec<Vec<u32>> = if cfg.stats_mode == AccumulationMode::Aggregated {
        let mut lists = vec![Vec::new(); side * side];
        for &(a, b) in &all_pairs {
            lists[a as usize].push(b);
            lists[b as usize].push(a);
        }
        lists
    } else {
        Vec::new()
    };
    let dict_f32 = dictionary.elements_f32();

    let mut stats =
        CooccurrenceStats::new(dictionary.k(), cfg.stats_mode).with_v_from_pairs(cfg.v_from_pairs);
    for chunk in views.chunks(BATCH) {
        let partials: Vec<Result<(Vec<SparseCode>, Vec<u32>)>> = chunk
            .par_iter()
            .map(|&(vi, flipped, img)| {
                let image = view_image(pc, flipped, img)?;
                let grid = extract_patches(&image, pc.patch_side)?;
                let unit = preprocess_grid(&grid, whitening, pc.cooccur_range)?;
                let unit_f32 = unit.mapv(|v| v as f32);
                let codes = encode_rows_f32(&unit_f32, &dict_f32, pc.encoder);
                // pairwise mode samples pair indices; aggregated mode samples
                // center cells
                let pool = match cfg.stats_mode {
                    AccumulationMode::Pairwise => all_pairs.len(),
                    AccumulationMode::Aggregated => side * side,
                    AccumulationMode::SecondOrder => unreachable!(),
                };
                let budget = if cfg.pairs_per_image == 0 {
                    pool
                } else {
                    cfg.pairs_per_image
                };
                let picks = sample_indices(pool, budget, image_seed(cfg.seed, 3, vi));
                Ok((codes, picks))
            })
            .collect();
        for p in partials {
            let (codes, picks) = p?;
            if !cfg.v_from_pairs {
                for code in &codes {
                    stats.accumulate_second_moment(code)?;
                }
            }
            match cfg.stats_mode {
                AccumulationMode::Pairwise => {
                    for &pi in &picks {
                        let (a, b) = all_pairs[pi as usize];
                        stats.accumulate_pair(&codes[a as usize], &codes[b as usize])?;
                    }
                }
                AccumulationMode::Aggregated => {
                    for &cell in &picks {
                        let ns: Vec<&SparseCode> = neighbors_of[cell as usize]
                            .iter()
                            .map(|&j| &codes[j as usize])
                            .collect();
                        if !ns.is_empty() {
                            stats.accumulate_neighborhood(&codes[cell as usize], &ns, None)?;
                        }
                    }
                }
                AccumulationMode::SecondOrder => unreachable!(),
            }
        }
    }
    Ok(stats)
}

pub struct PipelineRunner {
    pub config: ExperimentConfig,
    pub out_dir: PathBuf,
    pub timings: StageTimings,
    train_cache: Option<ImageDataset>,
    test_cache: Option<ImageDataset>,
}

impl PipelineRunner {
    pub fn new(config: ExperimentConfig, out_dir: impl Into<PathBuf>) -> Result<Self> {
        config.pipeline.validate()?;
        let out_dir = out_dir.into();
        std::fs::create_dir_all(&out_dir).map_err(|e| SmtError::io(&out_dir, e))?;
        Ok(PipelineRunner {
            config,
            out_dir,
            timings: StageTimings::default(),
            train_cache: None,
            test_cache: None,
        })
    }

    pub fn train(&mut self) -> Result<&ImageDataset> {
        if self.train_cache.is_none() {
            self.train_cache = Some(load_split(&self.config, Split::Train)?);
        }
        Ok(self.train_cache.as_ref().expect("just loaded"))
    }

    pub fn test(&mut self) -> Result<&ImageDataset> {
        if self.test_cache.is_none() {
            self.test_cache = Some(load_split(&self.config, Split::Test)?);
        }
        Ok(self.test_cache.as_ref().expect("just loaded"))
    }

    /// Compute the full stage hash chain (hashes the dataset bytes).
    pub fn chain(&self) -> Result<StageChain> {
        let cfg = &self.config;
        let pc = &cfg.pipeline;
        let ingest = ingest_hash(cfg)?;
        let whiten = ConfigHash::derive(
            Some(&ingest),
            "whiten",
            &format!(
                "t={} gray={} flip={} radius={} lambda={} sample={} seed={}",
                pc.patch_side,
                pc.grayscale,
                pc.hflip_augment,
                pc.cooccur_range,
                pc.whitening_lambda_rel,
                cfg.fit_sample,
                cfg.seed
            ),
        );
        let dict = ConfigHash::derive(
            Some(&whiten),
            "dict",
            &format!(
                "method={:?} spherical={} k={} epochs={} eta={} sample={} seed={}",
                cfg.dict_method, cfg.dict_spherical, pc.dict_size, cfg.dict_epochs, cfg.dict_eta, cfg.fit_sample, cfg.seed
            ),
        );
        let stats = ConfigHash::derive(
            Some(&dict),
            "stats",
            &format!(
                "encoder={:?} pairs={} mode={} v_from_pairs={} seed={}",
                pc.encoder, cfg.pairs_per_image, cfg.stats_mode, cfg.v_from_pairs, cfg.seed
            ),
        );
        let smt = ConfigHash::derive(
            Some(&stats),
            "smt",
            &format!(
                "d_emb={} drop_first={} v_floor={}",
                pc.d_emb, pc.drop_first, cfg.v_floor_rel
            ),
        );
        let embed = |split: Split| {
            ConfigHash::derive(
                Some(&smt),
                "embed",
                &format!("ks={} stride={} split={split}", pc.pool_kernel, pc.pool_stride),
            )
        };
        Ok(StageChain {
            ingest,
            whiten,
            dict,
            stats,
            smt,
            embed_train: embed(Split::Train),
            embed_test: embed(Split::Test),
        })
    }

    fn artifact_path(&self, stage: &str, hash: &ConfigHash, ext: &str) -> PathBuf {
        self.out_dir.join(format!("{stage}-{}.{ext}", hash.short()))
    }

    fn note(&mut self, stage: &str, started: Instant, cached: bool) {
        self.timings
            .seconds
            .insert(stage.to_string(), started.elapsed().as_secs_f64());
        self.timings.cached.insert(stage.to_string(), cached);
    }

    fn require(stage: &str, path: &Path) -> SmtError {
        SmtError::MissingDependency {
            stage: stage.to_string(),
            missing: path.display().to_string(),
        }
    }

    /// Fit or load the whitening operator. With `build == false` a missing
    /// artifact is a dependency error.
    pub fn whitening_stage(&mut self, chain: &StageChain, build: bool) -> Result<WhiteningOperator> {
        let t0 = Instant::now();
        let path = self.artifact_path("whitening", &chain.whiten, "smtb");
        if path.exists() {
            if let Artifact::Whitening(op) = read_artifact_file(&path, &chain.whiten)? {
                self.note("whiten", t0, true);
                return Ok(op);
            }
        }
        if !build {
            return Err(Self::require("train-dict (whitening)", &path));
        }
        let cfg = self.config.clone();
        let images = &self.train()?.images;
        let (moment, n) = whitening_moment(images, &cfg.pipeline, cfg.fit_sample, cfg.seed)?;
        let op = fit_whitening_from_moment(&moment, n, cfg.pipeline.whitening_lambda_rel)?;
        write_artifact_file(&path, &Artifact::Whitening(op.clone()), &chain.whiten)?;
        self.note("whiten", t0, false);
        Ok(op)
    }

    pub fn dictionary_stage(
        &mut self,
        chain: &StageChain,
        build: bool,
        whitening: &WhiteningOperator,
    ) -> Result<Dictionary> {
        let t0 = Instant::now();
        let path = self.artifact_path("dictionary", &chain.dict, "smtb");
        if path.exists() {
            if let Artifact::Dictionary(d) = read_artifact_file(&path, &chain.dict)? {
                self.note("dict", t0, true);
                return Ok(d);
            }
        }
        if !build {
            return Err(Self::require("train-dict", &path));
        }
        let cfg = self.config.clone();
        let images = &self.train()?.images;
        let sample = dictionary_sample(images, &cfg.pipeline, whitening, cfg.fit_sample, cfg.seed)?;
        let dict = match cfg.dict_method {
            DictionaryMethod::Kmeans => {
                kmeans_fit(
                    sample.view(),
                    cfg.pipeline.dict_size,
                    cfg.dict_spherical,
                    cfg.dict_epochs,
                    cfg.dict_eta,
                    cfg.seed,
                )?
                .0
            }
            DictionaryMethod::Sample => {
                if !cfg.dict_spherical {
                    return Err(SmtError::Config(
                        "sampled dictionaries are always unit-normalized; dict_spherical=false needs dict_method=kmeans".into(),
                    ));
                }
                sample_dictionary(sample.view(), cfg.pipeline.dict_size, cfg.seed)?
            }
        };
        write_artifact_file(&path, &Artifact::Dictionary(dict.clone()), &chain.dict)?;
        self.note("dict", t0, false);
        Ok(dict)
    }

    pub fn stats_stage(
        &mut self,
        chain: &StageChain,
        build: bool,
        whitening: &WhiteningOperator,
        dictionary: &Dictionary,
    ) -> Result<CooccurrenceStats> {
        let t0 = Instant::now();
        let path = self.artifact_path("stats", &chain.stats, "smtb");
        if path.exists() {
            if let Artifact::Stats(s) = read_artifact_file(&path, &chain.stats)? {
                self.note("stats", t0, true);
                return Ok(s);
            }
        }
        if !build {
            return Err(Self::require("fit-smt (statistics)", &path));
        }
        let cfg = self.config.clone();
        let images = &self.train()?.images;
        let stats = accumulate_statistics(images, &cfg, whitening, dictionary)?;
        write_artifact_file(&path, &Artifact::Stats(stats.clone()), &chain.stats)?;
        self.note("stats", t0, false);
        Ok(stats)
    }

    pub fn smt_stage(
        &mut self,
        chain: &StageChain,
        build: bool,
        stats: Option<&CooccurrenceStats>,
    ) -> Result<SpectralEmbedding> {
        let t0 = Instant::now();
        let path = self.artifact_path("embedding", &chain.smt, "smtb");
        if path.exists() {
            if let Artifact::Embedding(e) = read_artifact_file(&path, &chain.smt)? {
                self.note("smt", t0, true);
                return Ok(e);
            }
        }
        if !build {
            return Err(Self::require("fit-smt", &path));
        }
        let stats = stats.ok_or_else(|| SmtError::State("solve needs statistics".into()))?;
        let cfg = &self.config;
        let e = solve_embedding(
            stats,
            cfg.pipeline.d_emb,
            cfg.pipeline.drop_first,
            cfg.v_floor_rel,
        )?;
        write_artifact_file(&path, &Artifact::Embedding(e.clone()), &chain.smt)?;
        self.note("smt", t0, false);
        Ok(e)
    }

    pub fn embed_path(&self, chain: &StageChain, split: Split) -> PathBuf {
        self.artifact_path(&format!("embed-{split}"), chain.embed(split), "f32")
    }

    pub fn embed_stage(
        &mut self,
        chain: &StageChain,
        split: Split,
        build: bool,
        pipeline: Option<&FittedPipeline>,
    ) -> Result<Array2<f32>> {
        let t0 = Instant::now();
        let stage = format!("embed-{split}");
        let hash = chain.embed(split);
        let path = self.embed_path(chain, split);
        if let Ok((m, side)) = read_embedding_matrix(&path) {
            if side.config_hash == hash.hex() {
                self.note(&stage, t0, true);
                return Ok(m);
            }
        }
        if !build {
            return Err(Self::require("embed", &path));
        }
        let pipeline = pipeline.ok_or_else(|| SmtError::State("embed needs a fitted pipeline".into()))?;
        let ds = match split {
            Split::Train => self.train()?,
            Split::Test => self.test()?,
        };
        let m = embed_dataset(&ds.images, |img| pipeline.embed_image(img))?;
        let probe = pipeline.embed_image(&ds.images[0])?;
        let sidecar = EmbeddingSidecar {
            rows: m.nrows(),
            cols: m.ncols(),
            pool_rows: probe.pool_rows,
            pool_cols: probe.pool_cols,
            d_emb: probe.d_emb,
            dataset: self.config.dataset.name().into(),
            split: split.to_string(),
            config_hash: hash.hex(),
        };
        write_embedding_matrix(&path, &m, &sidecar)?;
        self.note(&stage, t0, false);
        Ok(m)
    }

    /// Sweep the configured k values; returns per-k accuracy and the best
    /// (ties to the smaller k).
    pub fn eval_stage(
        &mut self,
        train_matrix: &Array2<f32>,
        test_matrix: &Array2<f32>,
    ) -> Result<(BTreeMap<usize, f64>, usize, f64)> {
        let t0 = Instant::now();
        let cfg = self.config.clone();
        let train_labels = self.train()?.labels.clone();
        let test_labels = self.test()?.labels.clone();
        let mut ks: Vec<usize> = cfg.knn_k_sweep.clone();
        ks.push(cfg.knn_k);
        ks.sort_unstable();
        ks.dedup();
        let mut top1_by_k = BTreeMap::new();
        for &k in &ks {
            let acc = knn_accuracy(
                train_matrix.view(),
                &train_labels,
                test_matrix.view(),
                &test_labels,
                &KnnConfig {
                    k,
                    temperature: cfg.knn_temperature,
                },
            )?;
            top1_by_k.insert(k, acc);
        }
        let (&best_k, &top1) = top1_by_k
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(a.0)))
            .expect("nonempty sweep");
        self.note("eval", t0, false);
        Ok((top1_by_k, best_k, top1))
    }

    /// Run every stage in order, then write `report.json` and
    /// `timings.json` under the output directory.
    pub fn run(&mut self) -> Result<ExperimentReport> {
        let chain = self.chain()?;
        let whitening = self.whitening_stage(&chain, true)?;
        let dictionary = self.dictionary_stage(&chain, true, &whitening)?;
        // skip the statistics pass entirely when the solve is cached
        let embedding = match self.smt_stage(&chain, false, None) {
            Ok(e) => e,
            Err(_) => {
                let stats = self.stats_stage(&chain, true, &whitening, &dictionary)?;
                self.smt_stage(&chain, true, Some(&stats))?
            }
        };
        let pipeline = FittedPipeline::assemble(
            self.config.pipeline.clone(),
            whitening,
            dictionary,
            embedding,
        )?;
        let train_matrix = self.embed_stage(&chain, Split::Train, true, Some(&pipeline))?;
        let test_matrix = self.embed_stage(&chain, Split::Test, true, Some(&pipeline))?;
        drop(pipeline);
        let (top1_by_k, best_k, top1) = self.eval_stage(&train_matrix, &test_matrix)?;

        let mut artifacts = BTreeMap::new();
        artifacts.insert(
            "whitening".into(),
            file_name(&self.artifact_path("whitening", &chain.whiten, "smtb")),
        );
        artifacts.insert(
            "dictionary".into(),
            file_name(&self.artifact_path("dictionary", &chain.dict, "smtb")),
        );
        artifacts.insert(
            "stats".into(),
            file_name(&self.artifact_path("stats", &chain.stats, "smtb")),
        );
        artifacts.insert(
            "embedding".into(),
            file_name(&self.artifact_path("embedding", &chain.smt, "smtb")),
        );
        artifacts.insert(
            "embed-train".into(),
            file_name(&self.embed_path(&chain, Split::Train)),
        );
        artifacts.insert(
            "embed-test".into(),
            file_name(&self.embed_path(&chain, Split::Test)),
        );

        let report = ExperimentReport {
            dataset: self.config.dataset.name().into(),
            config_hash: self.config.config_hash().hex(),
            stages: chain.as_map(),
            artifacts,
            top1_by_k,
            best_k,
            top1,
            config_text: self.config.to_config_text(),
        };
        self.write_report(&report)?;
        Ok(report)
    }

    pub fn write_report(&self, report: &ExperimentReport) -> Result<()> {
        let report_path = self.out_dir.join("report.json");
        let json = serde_json::to_string_pretty(report)
            .map_err(|e| SmtError::Format(format!("report serialization: {e}")))?;
        std::fs::write(&report_path, &json).map_err(|e| SmtError::io(&report_path, e))?;
        let timings_path = self.out_dir.join("timings.json");
        let tjson = serde_json::to_string_pretty(&self.timings)
            .map_err(|e| SmtError::Format(format!("timings serialization: {e}")))?;
        std::fs::write(&timings_path, tjson).map_err(|e| SmtError::io(&timings_path, e))
    }
}

fn file_name(p: &Path) -> String {
    p.file_name().unwrap_or_default().to_string_lossy().into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_seed_is_stable_and_spread() {
        let a = image_seed(7, 3, 100);
        assert_eq!(a, image_seed(7, 3, 100));
        assert_ne!(a, image_seed(7, 3, 101));
        assert_ne!(a, image_seed(7, 4, 100));
        assert_ne!(a, image_seed(8, 3, 100));
    }

    #[test]
    fn training_views_order_and_flip_flag() {
        let images = vec![
            Image::new(2, 2, 1, vec![1, 2, 3, 4]),
            Image::new(2, 2, 1, vec![5, 6, 7, 8]),
        ];
        let mut cfg = crate::config::ExperimentConfig::mnist_default().pipeline;
        cfg.hflip_augment = false;
        assert_eq!(training_views(&images, &cfg).len(), 2);
        cfg.hflip_augment = true;
        let views = training_views(&images, &cfg);
        assert_eq!(views.len(), 4);
        assert_eq!(views[2].0, 2);
        assert!(views[2].1);
    }
}
