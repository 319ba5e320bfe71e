//! Experiment configuration: a plain-text `key = value` format with a
//! canonical serialization that defines the config hash embedded in every
//! artifact.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::artifact::ConfigHash;
use crate::dataset::{default_data_dir, CifarVariant};
use crate::error::{Result, SmtError};
use crate::representation::PipelineConfig;
use crate::smt_core::AccumulationMode;
use crate::sparse::EncoderKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    Cifar100,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Cifar100 => "cifar100",
        }
    }

    pub fn cifar_variant(self) -> Option<CifarVariant> {
        match self {
            DatasetKind::Mnist => None,
            DatasetKind::Cifar10 => Some(CifarVariant::Cifar10),
            DatasetKind::Cifar100 => Some(CifarVariant::Cifar100),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DictionaryMethod {
    /// Online spherical K-means over preprocessed patches.
    Kmeans,
    /// Uniformly sampled preprocessed patches.
    Sample,
}

/// Everything a full experiment run needs, serializable to the plain-text
/// config format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    /// Dataset root; empty means `SMT_DATA_DIR` or `./data`.
    pub data_root: Option<PathBuf>,
    pub pipeline: PipelineConfig,
    pub dict_method: DictionaryMethod,
    /// Unit-norm landmarks (cosine encoding). Euclidean landmarks are only
    /// meaningful for VQ encoding.
    pub dict_spherical: bool,
    pub dict_epochs: usize,
    pub dict_eta: f64,
    /// Patch sample cap for whitening and dictionary fitting.
    pub fit_sample: usize,
    /// Neighbor pairs drawn per image for the statistics pass; 0 keeps all.
    pub pairs_per_image: usize,
    pub stats_mode: AccumulationMode,
    /// When false, `V` is accumulated once per patch over the whole training
    /// sweep instead of through pair contributions.
    pub v_from_pairs: bool,
    pub v_floor_rel: f64,
    pub knn_k: usize,
    pub knn_temperature: f64,
    /// Extra `k` values swept at evaluation time.
    pub knn_k_sweep: Vec<usize>,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Paper-style MNIST defaults at desk scale.
    pub fn mnist_default() -> Self {
        ExperimentConfig {
            dataset: DatasetKind::Mnist,
            data_root: None,
            pipeline: PipelineConfig {
                patch_side: 6,
                cooccur_range: 3,
                encoder: EncoderKind::Vq,
                dict_size: 8192,
                d_emb: 32,
                drop_first: 0,
                pool_kernel: 23,
                pool_stride: 23,
                hflip_augment: false,
                grayscale: false,
                whitening_lambda_rel: 1e-2,
            },
            dict_method: DictionaryMethod::Kmeans,
            dict_spherical: true,
            dict_epochs: 5,
            dict_eta: 0.5,
            fit_sample: 200_000,
            pairs_per_image: 0,
            stats_mode: AccumulationMode::Pairwise,
            v_from_pairs: false,
            v_floor_rel: 1e-7,
            knn_k: 30,
            knn_temperature: 0.07,
            knn_k_sweep: vec![10, 30, 50],
            seed: 0,
        }
    }

    /// CIFAR-10 grayscale defaults at desk scale.
    pub fn cifar10_gray_default() -> Self {
        ExperimentConfig {
            dataset: DatasetKind::Cifar10,
            data_root: None,
            pipeline: PipelineConfig {
                patch_side: 6,
                cooccur_range: 4,
                encoder: EncoderKind::Gq { threshold: 0.45 },
                dict_size: 8192,
                d_emb: 384,
                drop_first: 0,
                pool_kernel: 9,
                pool_stride: 9,
                hflip_augment: true,
                grayscale: true,
                whitening_lambda_rel: 1e-2,
            },
            dict_method: DictionaryMethod::Sample,
            dict_spherical: true,
            dict_epochs: 5,
            dict_eta: 0.5,
            fit_sample: 400_000,
            pairs_per_image: 192,
            stats_mode: AccumulationMode::Pairwise,
            v_from_pairs: false,
            v_floor_rel: 1e-7,
            knn_k: 30,
            knn_temperature: 0.07,
            knn_k_sweep: vec![10, 30, 50],
            seed: 0,
        }
    }

    /// CIFAR-10 color defaults: lower threshold, drop the leading dimensions.
    pub fn cifar10_color_default() -> Self {
        let mut cfg = Self::cifar10_gray_default();
        cfg.pipeline.grayscale = false;
        cfg.pipeline.encoder = EncoderKind::Gq { threshold: 0.3 };
        cfg.pipeline.drop_first = 16;
        cfg
    }

    pub fn resolved_data_root(&self) -> PathBuf {
        self.data_root.clone().unwrap_or_else(default_data_dir)
    }

    /// Canonical `key = value` text; field order is fixed so the hash is
    /// stable.
    pub fn to_config_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dataset = {}", self.dataset.name());
        if let Some(root) = &self.data_root {
            let _ = writeln!(s, "data_root = {}", root.display());
        }
        let _ = writeln!(s, "patch_side = {}", self.pipeline.patch_side);
        let _ = writeln!(s, "cooccur_range = {}", self.pipeline.cooccur_range);
        match self.pipeline.encoder {
            EncoderKind::Vq => {
                let _ = writeln!(s, "encoder = vq");
            }
            EncoderKind::Gq { threshold } => {
                let _ = writeln!(s, "encoder = gq");
                let _ = writeln!(s, "gq_threshold = {threshold}");
            }
        }
        let _ = writeln!(s, "dict_size = {}", self.pipeline.dict_size);
        let _ = writeln!(s, "d_emb = {}", self.pipeline.d_emb);
        let _ = writeln!(s, "drop_first = {}", self.pipeline.drop_first);
        let _ = writeln!(s, "pool_kernel = {}", self.pipeline.pool_kernel);
        let _ = writeln!(s, "pool_stride = {}", self.pipeline.pool_stride);
        let _ = writeln!(s, "hflip = {}", self.pipeline.hflip_augment);
        let _ = writeln!(s, "grayscale = {}", self.pipeline.grayscale);
        let _ = writeln!(s, "lambda_rel = {}", self.pipeline.whitening_lambda_rel);
        let _ = writeln!(
            s,
            "dict_method = {}",
            match self.dict_method {
                DictionaryMethod::Kmeans => "kmeans",
                DictionaryMethod::Sample => "sample",
            }
        );
        let _ = writeln!(s, "dict_spherical = {}", self.dict_spherical);
        let _ = writeln!(s, "dict_epochs = {}", self.dict_epochs);
        let _ = writeln!(s, "dict_eta = {}", self.dict_eta);
        let _ = writeln!(s, "fit_sample = {}", self.fit_sample);
        let _ = writeln!(s, "pairs_per_image = {}", self.pairs_per_image);
        let _ = writeln!(s, "stats_mode = {}", self.stats_mode);
        let _ = writeln!(s, "v_from_pairs = {}", self.v_from_pairs);
        let _ = writeln!(s, "v_floor_rel = {}", self.v_floor_rel);
        let _ = writeln!(s, "knn_k = {}", self.knn_k);
        let _ = writeln!(s, "knn_temperature = {}", self.knn_temperature);
        let _ = writeln!(
            s,
            "knn_k_sweep = {}",
            self.knn_k_sweep
                .iter()
                .map(|k| k.to_string())
                .collect::<Vec<_>>()
                .join(",")
        );
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }

    pub fn config_hash(&self) -> ConfigHash {
        ConfigHash::of_bytes(self.to_config_text().as_bytes())
    }

    /// Parse the `key = value` format; `#` starts a comment, unknown keys are
    /// rejected.
    pub fn from_config_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::mnist_default();
        let mut encoder_name: Option<String> = None;
        let mut gq_threshold: Option<f64> = None;
        let mut saw_dataset = false;

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                SmtError::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| {
                SmtError::Config(format!("line {}: bad {what} value {value:?}", lineno + 1))
            };
            match key {
                "dataset" => {
                    cfg.dataset = match value {
                        "mnist" => DatasetKind::Mnist,
                        "cifar10" => DatasetKind::Cifar10,
                        "cifar100" => DatasetKind::Cifar100,
                        _ => return Err(bad("dataset")),
                    };
                    saw_dataset = true;
                }
                "data_root" => cfg.data_root = Some(PathBuf::from(value)),
                "patch_side" => cfg.pipeline.patch_side = value.parse().map_err(|_| bad(key))?,
                "cooccur_range" => {
                    cfg.pipeline.cooccur_range = value.parse().map_err(|_| bad(key))?
                }
                "encoder" => encoder_name = Some(value.to_string()),
                "gq_threshold" => gq_threshold = Some(value.parse().map_err(|_| bad(key))?),
                "dict_size" => cfg.pipeline.dict_size = value.parse().map_err(|_| bad(key))?,
                "d_emb" => cfg.pipeline.d_emb = value.parse().map_err(|_| bad(key))?,
                "drop_first" => cfg.pipeline.drop_first = value.parse().map_err(|_| bad(key))?,
                "pool_kernel" => cfg.pipeline.pool_kernel = value.parse().map_err(|_| bad(key))?,
                "pool_stride" => cfg.pipeline.pool_stride = value.parse().map_err(|_| bad(key))?,
                "hflip" => cfg.pipeline.hflip_augment = value.parse().map_err(|_| bad(key))?,
                "grayscale" => cfg.pipeline.grayscale = value.parse().map_err(|_| bad(key))?,
                "lambda_rel" => {
                    cfg.pipeline.whitening_lambda_rel = value.parse().map_err(|_| bad(key))?
                }
                "dict_method" => {
                    cfg.dict_method = match value {
                        "kmeans" => DictionaryMethod::Kmeans,
                        "sample" => DictionaryMethod::Sample,
                        _ => return Err(bad(key)),
                    }
                }
                "dict_spherical" => cfg.dict_spherical = value.parse().map_err(|_| bad(key))?,
                "dict_epochs" => cfg.dict_epochs = value.parse().map_err(|_| bad(key))?,
                "dict_eta" => cfg.dict_eta = value.parse().map_err(|_| bad(key))?,
                "fit_sample" => cfg.fit_sample = value.parse().map_err(|_| bad(key))?,
                "pairs_per_image" => cfg.pairs_per_image = value.parse().map_err(|_| bad(key))?,
                "stats_mode" => {
                    cfg.stats_mode = match value {
                        "pairwise" => AccumulationMode::Pairwise,
                        "aggregated" => AccumulationMode::Aggregated,
                        "second_order" => AccumulationMode::SecondOrder,
                        _ => return Err(bad(key)),
                    }
                }
                "v_from_pairs" => cfg.v_from_pairs = value.parse().map_err(|_| bad(key))?,
                "v_floor_rel" => cfg.v_floor_rel = value.parse().map_err(|_| bad(key))?,
                "knn_k" => cfg.knn_k = value.parse().map_err(|_| bad(key))?,
                "knn_temperature" => cfg.knn_temperature = value.parse().map_err(|_| bad(key))?,
                "knn_k_sweep" => {
                    let mut ks = Vec::new();
                    for part in value.split(',').filter(|p| !p.trim().is_empty()) {
                        ks.push(part.trim().parse().map_err(|_| bad(key))?);
                    }
                    cfg.knn_k_sweep = ks;
                }
                "seed" => cfg.seed = value.parse().map_err(|_| bad(key))?,
                other => {
                    return Err(SmtError::Config(format!(
                        "line {}: unknown key {other:?}",
                        lineno + 1
                    )))
                }
            }
        }
        if !saw_dataset {
            return Err(SmtError::Config("config is missing `dataset`".into()));
        }
        match (encoder_name.as_deref(), gq_threshold) {
            (Some("vq") | None, None) => {
                if encoder_name.as_deref() == Some("vq") {
                    cfg.pipeline.encoder = EncoderKind::Vq;
                }
            }
            (Some("vq"), Some(_)) => {
                return Err(SmtError::Config(
                    "gq_threshold given but encoder is vq".into(),
                ))
            }
            (Some("gq"), Some(t)) => cfg.pipeline.encoder = EncoderKind::Gq { threshold: t },
            (Some("gq"), None) => {
                return Err(SmtError::Config("encoder gq needs gq_threshold".into()))
            }
            (Some(other), _) => {
                return Err(SmtError::Config(format!("unknown encoder {other:?}")))
            }
            (None, Some(_)) => {
                return Err(SmtError::Config(
                    "gq_threshold given but no encoder named".into(),
                ))
            }
        }
        cfg.pipeline.validate()?;
        if cfg.knn_k == 0 || !(cfg.knn_temperature > 0.0) {
            return Err(SmtError::Config("invalid knn settings".into()));
        }
        Ok(cfg)
    }
}
