//! `smt`: reproducible sparse-manifold-transform experiments from the
//! command line. Stages cache their artifacts under the output directory and
//! refuse artifacts produced under a different configuration.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use smt::ablation::{
    run_dict_size_ablation, run_reduction_ablation, write_dict_size_csv, write_reduction_csv,
};
use smt::artifact::read_embedding_matrix;
use smt::config::ExperimentConfig;
use smt::dataset::{write_ppm, Split};
use smt::error::SmtError;
use smt::evaluation::{knn_accuracy, KnnConfig};
use smt::pipeline::{load_split, PipelineRunner};
use smt::representation::FittedPipeline;
use smt::smt_core::AccumulationMode;
use smt::spiral::{
    run_spiral_smt, write_embedding_csv, write_neighborhood_csv, write_svg_scatter, SpiralParams,
};
use smt::word::{
    build_vocab, cooccurrence_vs_similarity, nearest_words, train_word_smt, write_word2vec_text,
};

#[derive(Parser)]
#[command(name = "smt", version, about = "Sparse manifold transform toolkit")]
struct Cli {
    /// Worker threads for the parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Plain-text key=value experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Dataset root override (otherwise config, SMT_DATA_DIR, or ./data).
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, SmtError> {
        let text = std::fs::read_to_string(&self.config)
            .map_err(|e| SmtError::io(&self.config, e))?;
        let mut cfg = ExperimentConfig::from_config_text(&text)?;
        if let Some(root) = &self.data_root {
            cfg.data_root = Some(root.clone());
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline: ingest, whiten, dictionary, statistics, solve,
    /// embed, evaluate.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Artifact and report directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate dataset files and report record counts and checksums.
    Ingest {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_parser = parse_split, default_value = "train")]
        split: String,
        /// Export the first N images as PPM files for inspection.
        #[arg(long, default_value_t = 0)]
        export_ppm: usize,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Fit the whitening operator and the landmark dictionary.
    TrainDict {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Dictionary size override.
        #[arg(long)]
        size: Option<usize>,
        /// Unit-norm landmarks (cosine encoding).
        #[arg(long)]
        spherical: Option<bool>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Accumulate co-occurrence statistics and solve for the projection.
    FitSmt {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Embedding dimension override.
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        drop_first: Option<usize>,
        /// Accumulation mode: pairwise | aggregated.
        #[arg(long)]
        mode: Option<String>,
        /// Relative eigenvalue floor when inverting V.
        #[arg(long)]
        v_floor: Option<f64>,
    },
    /// Embed a dataset split into the matrix + sidecar format.
    Embed {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_split)]
        split: String,
        /// Also dump the embeddings as CSV (small runs only).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Soft-KNN evaluation of previously embedded splits.
    EvalKnn {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Dictionary-size and reduction-dimension ablations.
    Ablation {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Dictionary sizes for the three-variant sweep.
        #[arg(long, value_delimiter = ',', default_value = "512,2048,8192")]
        dict_sizes: Vec<usize>,
        /// PCA reduction dimensions (0 = full rank).
        #[arg(long, value_delimiter = ',', default_value = "128,500,2048,0")]
        pca_dims: Vec<usize>,
        /// Spectral embedding dimensions for the reduction curve.
        #[arg(long, value_delimiter = ',', default_value = "128,384,500")]
        smt_dims: Vec<usize>,
        /// Skip the reduction-dimension sweep.
        #[arg(long)]
        skip_reduction: bool,
    },
    /// The 2D two-spiral disentanglement demo.
    DemoSpiral {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n_per_arm: usize,
        #[arg(long, default_value_t = 1.5)]
        turns: f64,
        #[arg(long, default_value_t = 400)]
        landmarks: usize,
        /// Pair noise scale (default: half the median landmark spacing).
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long, default_value_t = 4)]
        d_emb: usize,
        #[arg(long, default_value_t = 17)]
        seed: u64,
        /// Also emit SVG scatter panels of the embedding dimensions.
        #[arg(long)]
        svg: bool,
    },
    /// Train a word embedding from a plain-text corpus.
    WordEmbed {
        /// UTF-8 corpus, one document per line.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 33_474)]
        vocab_size: usize,
        /// Context half-width in tokens.
        #[arg(long, default_value_t = 8)]
        window: usize,
        #[arg(long, default_value_t = 128)]
        dim: usize,
        /// Words to report nearest-neighbor and co-occurrence panels for.
        #[arg(long)]
        probe: Vec<String>,
    },
}

fn parse_split(s: &str) -> Result<String, String> {
    match s {
        "train" | "test" => Ok(s.to_string()),
        other => Err(format!("unknown split {other:?} (use train or test)")),
    }
}

fn split_of(s: &str) -> Split {
    if s == "train" {
        Split::Train
    } else {
        Split::Test
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error (config): could not set thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (category, code) = categorize(&e);
            eprintln!("error ({category}): {e}");
            ExitCode::from(code)
        }
    }
}

fn categorize(e: &SmtError) -> (&'static str, u8) {
    match e {
        SmtError::Config(_) | SmtError::InvalidArgument(_) => ("config", 2),
        SmtError::MissingDependency { .. } => ("missing-dependency", 3),
        SmtError::Format(_) | SmtError::HashMismatch { .. } => ("format", 4),
        SmtError::Io { .. } => ("io", 5),
        SmtError::State(_) => ("state", 6),
        SmtError::Rank { .. } | SmtError::Numeric(_) => ("numeric", 7),
        SmtError::ModeMismatch { .. } => ("mode", 8),
        SmtError::UnknownToken(_) => ("lookup", 9),
    }
}

fn dispatch(cmd: Command) -> Result<(), SmtError> {
    match cmd {
        Command::Run { cfg, out } => {
            let config = cfg.load()?;
            let mut runner = PipelineRunner::new(config, &out)?;
            let report = runner.run()?;
            println!(
                "{} top-1 {:.4} (best k = {}); report at {}",
                report.dataset,
                report.top1,
                report.best_k,
                out.join("report.json").display()
            );
            Ok(())
        }
        Command::Ingest {
            cfg,
            split,
            export_ppm,
            out,
        } => {
            let config = cfg.load()?;
            let split = split_of(&split);
            let ds = load_split(&config, split)?;
            let mut counts = BTreeMap::new();
            for &l in &ds.labels {
                *counts.entry(l).or_insert(0usize) += 1;
            }
            let report = serde_json::json!({
                "dataset": config.dataset.name(),
                "split": split.to_string(),
                "images": ds.len(),
                "classes": ds.num_classes,
                "height": ds.images[0].height,
                "width": ds.images[0].width,
                "channels": ds.images[0].channels,
                "per_class": counts,
            });
            println!("{}", serde_json::to_string_pretty(&report).unwrap());
            if export_ppm > 0 {
                std::fs::create_dir_all(&out).map_err(|e| SmtError::io(&out, e))?;
                for (i, img) in ds.images.iter().take(export_ppm).enumerate() {
                    let path = out.join(format!(
                        "{}-{split}-{i:05}-label{}.ppm",
                        config.dataset.name(),
                        ds.labels[i]
                    ));
                    let mut f =
                        std::fs::File::create(&path).map_err(|e| SmtError::io(&path, e))?;
                    write_ppm(img, &mut f)?;
                }
                eprintln!("wrote {} PPM files under {}", export_ppm.min(ds.len()), out.display());
            }
            Ok(())
        }
        Command::TrainDict {
            cfg,
            out,
            size,
            spherical,
            epochs,
        } => {
            let mut config = cfg.load()?;
            if let Some(k) = size {
                config.pipeline.dict_size = k;
            }
            if let Some(s) = spherical {
                config.dict_spherical = s;
            }
            if let Some(e) = epochs {
                config.dict_epochs = e;
            }
            let mut runner = PipelineRunner::new(config, &out)?;
            let chain = runner.chain()?;
            let whitening = runner.whitening_stage(&chain, true)?;
            let dict = runner.dictionary_stage(&chain, true, &whitening)?;
            println!(
                "dictionary: {} landmarks of dim {} (spherical: {}); artifacts under {}",
                dict.k(),
                dict.dim(),
                dict.spherical,
                out.display()
            );
            Ok(())
        }
        Command::FitSmt {
            cfg,
            out,
            dim,
            drop_first,
            mode,
            v_floor,
        } => {
            let mut config = cfg.load()?;
            if let Some(d) = dim {
                config.pipeline.d_emb = d;
            }
            if let Some(d) = drop_first {
                config.pipeline.drop_first = d;
            }
            if let Some(m) = mode {
                config.stats_mode = match m.as_str() {
                    "pairwise" => AccumulationMode::Pairwise,
                    "aggregated" => AccumulationMode::Aggregated,
                    other => {
                        return Err(SmtError::Config(format!(
                            "unknown mode {other:?} (use pairwise or aggregated)"
                        )))
                    }
                };
            }
            if let Some(v) = v_floor {
                config.v_floor_rel = v;
            }
            let mut runner = PipelineRunner::new(config, &out)?;
            let chain = runner.chain()?;
            let whitening = runner.whitening_stage(&chain, false)?;
            let dictionary = runner.dictionary_stage(&chain, false, &whitening)?;
            let embedding = match runner.smt_stage(&chain, false, None) {
                Ok(e) => e,
                Err(_) => {
                    let stats = runner.stats_stage(&chain, true, &whitening, &dictionary)?;
                    runner.smt_stage(&chain, true, Some(&stats))?
                }
            };
            println!(
                "projection: {} x {}, trailing eigenvalues {:?}",
                embedding.d_emb(),
                embedding.k(),
                &embedding.eigenvalues[..embedding.eigenvalues.len().min(4)]
            );
            Ok(())
        }
        Command::Embed {
            cfg,
            out,
            split,
            csv,
        } => {
            let config = cfg.load()?;
            let split = split_of(&split);
            let mut runner = PipelineRunner::new(config.clone(), &out)?;
            let chain = runner.chain()?;
            let whitening = runner.whitening_stage(&chain, false)?;
            let dictionary = runner.dictionary_stage(&chain, false, &whitening)?;
            let embedding = runner.smt_stage(&chain, false, None)?;
            let pipeline =
                FittedPipeline::assemble(config.pipeline.clone(), whitening, dictionary, embedding)?;
            let matrix = runner.embed_stage(&chain, split, true, Some(&pipeline))?;
            let path = runner.embed_path(&chain, split);
            println!(
                "embedded {} images into {} ({} dims each)",
                matrix.nrows(),
                path.display(),
                matrix.ncols()
            );
            if let Some(csv_path) = csv {
                let mut f =
                    std::fs::File::create(&csv_path).map_err(|e| SmtError::io(&csv_path, e))?;
                for row in matrix.rows() {
                    let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                    writeln!(f, "{}", line.join(",")).map_err(|e| SmtError::io(&csv_path, e))?;
                }
                eprintln!("CSV copy at {}", csv_path.display());
            }
            Ok(())
        }
        Command::EvalKnn {
            cfg,
            out,
            k,
            temperature,
        } => {
            let mut config = cfg.load()?;
            if let Some(k) = k {
                config.knn_k = k;
            }
            if let Some(t) = temperature {
                config.knn_temperature = t;
            }
            let runner = PipelineRunner::new(config.clone(), &out)?;
            let chain = runner.chain()?;
            // both splits must have been embedded already
            let train_path = runner.embed_path(&chain, Split::Train);
            let test_path = runner.embed_path(&chain, Split::Test);
            for (path, hash) in [
                (&train_path, chain.embed(Split::Train)),
                (&test_path, chain.embed(Split::Test)),
            ] {
                match read_embedding_matrix(path) {
                    Ok((_, side)) if side.config_hash == hash.hex() => {}
                    _ => {
                        return Err(SmtError::MissingDependency {
                            stage: "embed".into(),
                            missing: path.display().to_string(),
                        })
                    }
                }
            }
            let (train_m, _) = read_embedding_matrix(&train_path)?;
            let (test_m, _) = read_embedding_matrix(&test_path)?;
            let train_ds = load_split(&config, Split::Train)?;
            let test_ds = load_split(&config, Split::Test)?;
            let mut ks = config.knn_k_sweep.clone();
            ks.push(config.knn_k);
            ks.sort_unstable();
            ks.dedup();
            let mut sweep = BTreeMap::new();
            for &kk in &ks {
                let acc = knn_accuracy(
                    train_m.view(),
                    &train_ds.labels,
                    test_m.view(),
                    &test_ds.labels,
                    &KnnConfig {
                        k: kk,
                        temperature: config.knn_temperature,
                    },
                )?;
                sweep.insert(kk, acc);
            }
            let top1 = sweep[&config.knn_k];
            let report = serde_json::json!({
                "dataset": config.dataset.name(),
                "config_hash": config.config_hash().hex(),
                "k": config.knn_k,
                "temperature": config.knn_temperature,
                "top1": top1,
                "sweep": sweep.iter().map(|(k, v)| (k.to_string(), v)).collect::<BTreeMap<_, _>>(),
            });
            let report_path = out.join("eval-report.json");
            std::fs::write(&report_path, serde_json::to_string_pretty(&report).unwrap())
                .map_err(|e| SmtError::io(&report_path, e))?;
            let csv_path = out.join("eval-sweep.csv");
            let mut f = std::fs::File::create(&csv_path).map_err(|e| SmtError::io(&csv_path, e))?;
            writeln!(f, "k,top1").map_err(|e| SmtError::io(&csv_path, e))?;
            for (kk, acc) in &sweep {
                writeln!(f, "{kk},{acc}").map_err(|e| SmtError::io(&csv_path, e))?;
            }
            println!("top-1 {:.4} at k={} (report: {})", top1, config.knn_k, report_path.display());
            Ok(())
        }
        Command::Ablation {
            cfg,
            out,
            dict_sizes,
            pca_dims,
            smt_dims,
            skip_reduction,
        } => {
            let config = cfg.load()?;
            std::fs::create_dir_all(&out).map_err(|e| SmtError::io(&out, e))?;
            let rows = run_dict_size_ablation(&config, &dict_sizes, &out)?;
            let csv_path = out.join("ablation-dict-size.csv");
            let f = std::fs::File::create(&csv_path).map_err(|e| SmtError::io(&csv_path, e))?;
            write_dict_size_csv(&rows, f)?;
            println!("dictionary-size table: {}", csv_path.display());
            if !skip_reduction {
                let rows = run_reduction_ablation(&config, &pca_dims, &smt_dims, &out)?;
                let csv_path = out.join("ablation-reduction.csv");
                let f = std::fs::File::create(&csv_path).map_err(|e| SmtError::io(&csv_path, e))?;
                write_reduction_csv(&rows, f)?;
                println!("reduction-dimension table: {}", csv_path.display());
            }
            Ok(())
        }
        Command::DemoSpiral {
            out,
            n_per_arm,
            turns,
            landmarks,
            sigma,
            d_emb,
            seed,
            svg,
        } => {
            std::fs::create_dir_all(&out).map_err(|e| SmtError::io(&out, e))?;
            let params = SpiralParams {
                n_per_arm,
                turns,
                landmarks,
                sigma,
                d_emb,
                seed,
                ..SpiralParams::default()
            };
            let report = run_spiral_smt(&params)?;
            let csv_path = out.join("embeddings.csv");
            let f = std::fs::File::create(&csv_path).map_err(|e| SmtError::io(&csv_path, e))?;
            write_embedding_csv(&report, f)?;
            let n_path = out.join("neighborhoods.csv");
            let f = std::fs::File::create(&n_path).map_err(|e| SmtError::io(&n_path, e))?;
            write_neighborhood_csv(&report, f)?;
            if svg {
                for dim in 0..report.point_embeddings.ncols() {
                    let svg_path = out.join(format!("embedding-dim{}.svg", dim + 1));
                    let f =
                        std::fs::File::create(&svg_path).map_err(|e| SmtError::io(&svg_path, e))?;
                    write_svg_scatter(&report, dim, f)?;
                }
            }
            println!(
                "holdout arm accuracy {:.3}; within-arm cosine {:.3} vs cross-arm {:.3}; sigma {:.4}",
                report.holdout_arm_accuracy,
                report.within_arm_mean_cosine,
                report.cross_arm_mean_cosine,
                report.sigma
            );
            println!("outputs under {}", out.display());
            Ok(())
        }
        Command::WordEmbed {
            corpus,
            out,
            vocab_size,
            window,
            dim,
            probe,
        } => {
            std::fs::create_dir_all(&out).map_err(|e| SmtError::io(&out, e))?;
            let text = std::fs::read_to_string(&corpus).map_err(|e| SmtError::io(&corpus, e))?;
            let documents: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
            let vocab = build_vocab(documents.iter().copied(), vocab_size)?;
            eprintln!("vocabulary: {} tokens", vocab.len());
            let model = train_word_smt(documents.iter().copied(), &vocab, window, dim, 1e-7)?;

            let vocab_path = out.join("vocab.tsv");
            let f = std::fs::File::create(&vocab_path).map_err(|e| SmtError::io(&vocab_path, e))?;
            model.vocab.write(f)?;
            let emb_path = out.join("embeddings.txt");
            let f = std::fs::File::create(&emb_path).map_err(|e| SmtError::io(&emb_path, e))?;
            write_word2vec_text(&model, f)?;
            for word in &probe {
                let rows = cooccurrence_vs_similarity(&model, word, 10)?;
                let path = out.join(format!("neighbors-{word}.csv"));
                let mut f = std::fs::File::create(&path).map_err(|e| SmtError::io(&path, e))?;
                writeln!(f, "rank_by,word,cosine,cooccurrences").map_err(|e| SmtError::io(&path, e))?;
                for r in &rows {
                    writeln!(f, "{},{},{},{}", r.rank_by, r.word, r.cosine, r.cooccurrences)
                        .map_err(|e| SmtError::io(&path, e))?;
                }
                let top = nearest_words(&model, word, 5)?;
                println!(
                    "{word}: {}",
                    top.iter()
                        .map(|(w, c)| format!("{w} ({c:.3})"))
                        .collect::<Vec<_>>()
                        .join(", ")
                );
            }
            println!(
                "embeddings for {} words ({} dims) under {}",
                model.vocab.len(),
                dim,
                out.display()
            );
            Ok(())
        }
    }
}
