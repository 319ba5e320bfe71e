//! Ablation sweeps: representation quality versus dictionary size for the
//! sparse-only / whitened / full-projection variants, and versus reduction
//! dimension for PCA against the spectral solve.
//!
//! All variants share the exact encode-and-pool path, with global pooling so
//! the raw-code baselines stay within memory at large dictionary sizes.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::dataset::Split;
use crate::error::{Result, SmtError};
use crate::evaluation::{knn_accuracy, pca_fit_up_to, KnnConfig, Pca, PcaCodeMap};
use crate::pipeline::{load_split, PipelineRunner};
use crate::representation::{
    embed_dataset_with_maps, CodeMap, EncodingPipeline, LinearCodeMap, ProjectionMap, RawCodeMap,
};
use crate::smt_core::{code_whitening_map, solve_embedding};

#[derive(Debug, Clone, Serialize)]
pub struct DictSizeRow {
    pub dict_size: usize,
    pub variant: String,
    pub best_k: usize,
    pub top1: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReductionRow {
    pub method: String,
    pub dim: usize,
    pub best_k: usize,
    pub top1: f64,
}

/// Global-pooling variant of a config (one pooled position per image).
pub fn with_global_pooling(mut cfg: ExperimentConfig) -> ExperimentConfig {
    let image_side = match cfg.dataset {
        crate::config::DatasetKind::Mnist => 28,
        _ => 32,
    };
    let side = image_side - cfg.pipeline.patch_side + 1;
    cfg.pipeline.pool_kernel = side;
    cfg.pipeline.pool_stride = side;
    cfg
}

/// Sweep the configured k values; best accuracy with ties to the smaller k.
fn sweep_best(
    cfg: &ExperimentConfig,
    train: &Array2<f32>,
    train_labels: &[u8],
    test: &Array2<f32>,
    test_labels: &[u8],
) -> Result<(usize, f64)> {
    let mut ks = cfg.knn_k_sweep.clone();
    ks.push(cfg.knn_k);
    ks.sort_unstable();
    ks.dedup();
    let mut best = (0usize, f64::NEG_INFINITY);
    for &k in &ks {
        let acc = knn_accuracy(
            train.view(),
            train_labels,
            test.view(),
            test_labels,
            &KnnConfig {
                k,
                temperature: cfg.knn_temperature,
            },
        )?;
        if acc > best.1 {
            best = (k, acc);
        }
    }
    Ok(best)
}

/// Accuracy as a function of dictionary size for the three representations.
pub fn run_dict_size_ablation(
    base: &ExperimentConfig,
    dict_sizes: &[usize],
    out_dir: &Path,
) -> Result<Vec<DictSizeRow>> {
    let mut rows = Vec::new();
    for &k in dict_sizes {
        let mut cfg = with_global_pooling(base.clone());
        cfg.pipeline.dict_size = k;
        // the projection cannot exceed the dictionary size
        cfg.pipeline.d_emb = cfg
            .pipeline
            .d_emb
            .min(k.saturating_sub(cfg.pipeline.drop_first + 1));
        let mut runner = PipelineRunner::new(cfg.clone(), out_dir)?;
        let report = runner.run()?;
        drop(runner);
        rows.push(DictSizeRow {
            dict_size: k,
            variant: "smt".into(),
            best_k: report.best_k,
            top1: report.top1,
        });
        eprintln!("[ablation] dict_size={k} smt top1={:.4}", report.top1);

        // baselines reuse the cached whitening, dictionary, and statistics
        let mut runner = PipelineRunner::new(cfg.clone(), out_dir)?;
        let chain = runner.chain()?;
        let whitening = runner.whitening_stage(&chain, false)?;
        let dictionary = runner.dictionary_stage(&chain, false, &whitening)?;
        let stats = runner.stats_stage(&chain, false, &whitening, &dictionary)?;
        drop(runner);
        let train_ds = load_split(&cfg, Split::Train)?;
        let test_ds = load_split(&cfg, Split::Test)?;
        let encoding = EncodingPipeline::new(cfg.pipeline.clone(), whitening, dictionary)?;

        // sparse codes pooled directly
        {
            let map = RawCodeMap { k };
            let maps: Vec<&dyn CodeMap> = vec![&map];
            let train_m = embed_dataset_with_maps(&train_ds.images, &encoding, &maps)?.remove(0);
            let test_m = embed_dataset_with_maps(&test_ds.images, &encoding, &maps)?.remove(0);
            let (best_k, top1) =
                sweep_best(&cfg, &train_m, &train_ds.labels, &test_m, &test_ds.labels)?;
            rows.push(DictSizeRow {
                dict_size: k,
                variant: "sparse_only".into(),
                best_k,
                top1,
            });
            eprintln!("[ablation] dict_size={k} sparse_only top1={top1:.4}");
        }
        // code-space whitening in place of the projection
        {
            let (s_map, _) = code_whitening_map(&stats, cfg.v_floor_rel)?;
            let map = LinearCodeMap::new(&s_map);
            drop(s_map);
            let maps: Vec<&dyn CodeMap> = vec![&map];
            let train_m = embed_dataset_with_maps(&train_ds.images, &encoding, &maps)?.remove(0);
            let test_m = embed_dataset_with_maps(&test_ds.images, &encoding, &maps)?.remove(0);
            let (best_k, top1) =
                sweep_best(&cfg, &train_m, &train_ds.labels, &test_m, &test_ds.labels)?;
            rows.push(DictSizeRow {
                dict_size: k,
                variant: "sparse_whitened".into(),
                best_k,
                top1,
            });
            eprintln!("[ablation] dict_size={k} sparse_whitened top1={top1:.4}");
        }
    }
    Ok(rows)
}

/// Accuracy as a function of reduction dimension: centered PCA on the sparse
/// codes against the spectral solve, at the base dictionary size. A PCA dim
/// of 0 selects the full rank.
pub fn run_reduction_ablation(
    base: &ExperimentConfig,
    pca_dims: &[usize],
    smt_dims: &[usize],
    out_dir: &Path,
) -> Result<Vec<ReductionRow>> {
    let cfg = with_global_pooling(base.clone());
    let mut runner = PipelineRunner::new(cfg.clone(), out_dir)?;
    let chain = runner.chain()?;
    let whitening = runner.whitening_stage(&chain, true)?;
    let dictionary = runner.dictionary_stage(&chain, true, &whitening)?;
    let stats = runner.stats_stage(&chain, true, &whitening, &dictionary)?;
    drop(runner);
    let train_ds = load_split(&cfg, Split::Train)?;
    let test_ds = load_split(&cfg, Split::Test)?;
    let encoding = EncodingPipeline::new(cfg.pipeline.clone(), whitening, dictionary)?;
    let mut rows = Vec::new();

    // nested PCA: fit once at the largest requested dimension (0 asks for
    // the full rank)
    let mean = stats.code_mean()?;
    let max_req = pca_dims
        .iter()
        .map(|&d| if d == 0 { mean.len() } else { d })
        .max()
        .ok_or_else(|| SmtError::InvalidArgument("no PCA dims requested".into()))?;
    let pca_full = {
        let moment = stats.v_matrix()?;
        pca_fit_up_to(&moment, &mean, max_req)?
    };
    let achieved = pca_full.components.nrows();
    let mut dims: Vec<usize> = pca_dims
        .iter()
        .map(|&d| if d == 0 { achieved } else { d.min(achieved) })
        .collect();
    dims.sort_unstable();
    dims.dedup();

    // evaluate the PCA dims in one encode pass per split
    let pcas: Vec<Pca> = dims
        .iter()
        .map(|&d| Pca {
            mean: pca_full.mean.clone(),
            components: pca_full.components.slice(ndarray::s![..d, ..]).to_owned(),
            explained: pca_full.explained[..d].to_vec(),
        })
        .collect();
    drop(pca_full);
    let maps_owned: Vec<PcaCodeMap> = pcas.iter().map(PcaCodeMap::new).collect();
    drop(pcas);
    let maps: Vec<&dyn CodeMap> = maps_owned.iter().map(|m| m as &dyn CodeMap).collect();
    let train_ms = embed_dataset_with_maps(&train_ds.images, &encoding, &maps)?;
    let test_ms = embed_dataset_with_maps(&test_ds.images, &encoding, &maps)?;
    for ((d, train_m), test_m) in dims.iter().zip(train_ms).zip(test_ms) {
        let (best_k, top1) =
            sweep_best(&cfg, &train_m, &train_ds.labels, &test_m, &test_ds.labels)?;
        rows.push(ReductionRow {
            method: "pca".into(),
            dim: *d,
            best_k,
            top1,
        });
        eprintln!("[ablation] pca dim={d} top1={top1:.4}");
    }
    drop(maps_owned);

    // spectral solves at each requested dimension
    for &d in smt_dims {
        let emb = solve_embedding(&stats, d, cfg.pipeline.drop_first, cfg.v_floor_rel)?;
        let map = ProjectionMap::new(&emb);
        drop(emb);
        let maps: Vec<&dyn CodeMap> = vec![&map];
        let train_m = embed_dataset_with_maps(&train_ds.images, &encoding, &maps)?.remove(0);
        let test_m = embed_dataset_with_maps(&test_ds.images, &encoding, &maps)?.remove(0);
        let (best_k, top1) =
            sweep_best(&cfg, &train_m, &train_ds.labels, &test_m, &test_ds.labels)?;
        rows.push(ReductionRow {
            method: "smt".into(),
            dim: d,
            best_k,
            top1,
        });
        eprintln!("[ablation] smt dim={d} top1={top1:.4}");
    }
    Ok(rows)
}

pub fn write_dict_size_csv<W: Write>(rows: &[DictSizeRow], mut w: W) -> Result<()> {
    let io_err = |e: std::io::Error| SmtError::io("<ablation csv>", e);
    writeln!(w, "dict_size,variant,best_k,top1").map_err(io_err)?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.dict_size, r.variant, r.best_k, r.top1).map_err(io_err)?;
    }
    Ok(())
}

pub fn write_reduction_csv<W: Write>(rows: &[ReductionRow], mut w: W) -> Result<()> {
    let io_err = |e: std::io::Error| SmtError::io("<ablation csv>", e);
    writeln!(w, "method,dim,best_k,top1").map_err(io_err)?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.method, r.dim, r.best_k, r.top1).map_err(io_err)?;
    }
    Ok(())
}

/// Accuracy keyed by (dict_size, variant), for assertions over the sweep.
pub fn dict_rows_by_key(rows: &[DictSizeRow]) -> BTreeMap<(usize, String), f64> {
    rows.iter()
        .map(|r| ((r.dict_size, r.variant.clone()), r.top1))
        .collect()
}
