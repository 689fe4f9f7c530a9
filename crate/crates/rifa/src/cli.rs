//! Command-line front end: dataset generation, training, inference,
//! evaluation, augmentation, and report rendering.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

use crate::augment::AugmentSpec;
use crate::relnet::{Checkpoint, SyntheticFeatures};
use crate::scenedata::{self, RunConfig, Scene, Vocab};
use crate::{metrics, relnet, scoring, synthgen};

#[derive(Parser, Debug)]
#[command(name = "rifa", about = "scene-graph relation extraction pipeline", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GenPreset {
    /// Mixed rule set: asymmetric, symmetric, and inverse predicates.
    Standard,
    /// Two asymmetric predicates only.
    AsymmetricOnly,
}

#[derive(Args, Debug)]
pub struct ModelFlags {
    /// JSON run configuration; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Relation-score weight.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Pair-proposal count.
    #[arg(long)]
    pub topn: Option<usize>,
    /// Drop the relation feature from the relation network input.
    #[arg(long)]
    pub no_re: bool,
    /// Drop the subject/object embeddings from the relation network input.
    #[arg(long)]
    pub no_soe: bool,
    /// Score without the relation-possibility factor.
    #[arg(long)]
    pub no_rp: bool,
    /// Constrain the scorer to order-invariant pair inputs.
    #[arg(long)]
    pub symmetric: bool,
}

impl ModelFlags {
    pub fn resolve(&self, base: Option<RunConfig>) -> Result<RunConfig> {
        let mut cfg = match (&self.config, base) {
            (Some(path), _) => {
                let bytes = std::fs::read(path)
                    .with_context(|| format!("read config {}", path.display()))?;
                serde_json::from_slice(&bytes)
                    .with_context(|| format!("parse config {}", path.display()))?
            }
            (None, Some(cfg)) => cfg,
            (None, None) => RunConfig::default(),
        };
        if let Some(beta) = self.beta {
            cfg.beta = beta;
        }
        if let Some(topn) = self.topn {
            cfg.top_n = topn;
        }
        if self.no_re {
            cfg.use_relation_embedding = false;
        }
        if self.no_soe {
            cfg.use_subject_object_embeddings = false;
        }
        if self.no_rp {
            cfg.use_relation_possibility = false;
        }
        if self.symmetric {
            cfg.symmetric_scorer = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// JSON generation config; the seed flag still applies.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum, default_value = "standard")]
        preset: GenPreset,
        /// Number of scenes (preset default when omitted).
        #[arg(long)]
        scenes: Option<usize>,
        /// Long-tail skew exponent for predicate sampling.
        #[arg(long)]
        zipf: Option<f64>,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Rank relations for every scene of a dataset.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Triples kept per scene.
        #[arg(long, default_value_t = 100)]
        k: usize,
        /// Replace the class distribution with the dataset predicate
        /// frequency (fairness baseline).
        #[arg(long)]
        frequency_prior: bool,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        preds: PathBuf,
        /// JSON summary output.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-predicate CSV output.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Recall cutoffs, e.g. --k 20,50.
        #[arg(long = "k", value_delimiter = ',')]
        ks: Vec<usize>,
    },
    /// Add implied symmetric/inverse triples to a dataset.
    Augment {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        fraction: f64,
        #[arg(long)]
        seed: u64,
    },
    /// Render a saved evaluation summary as a table.
    Report {
        #[arg(long)]
        summary: PathBuf,
    },
}

fn load_data(path: &PathBuf) -> Result<(Vec<Scene>, Vocab)> {
    scenedata::load_dataset(path).with_context(|| format!("load dataset {}", path.display()))
}

/// Stored entity features take precedence inside [`SyntheticFeatures`];
/// the deterministic fallback covers relation features and datasets
/// converted without per-entity vectors.
fn provider_for(feature_dim: usize) -> SyntheticFeatures {
    SyntheticFeatures { dim: feature_dim }
}

fn rayon_pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        if n == 0 {
            bail!("--workers must be >= 1");
        }
        builder = builder.num_threads(n);
    }
    builder.build().context("build worker pool")
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { out, config, seed, preset, scenes, zipf } => {
            let mut cfg = match config {
                Some(path) => {
                    let bytes = std::fs::read(&path)
                        .with_context(|| format!("read config {}", path.display()))?;
                    let mut cfg: synthgen::GenConfig = serde_json::from_slice(&bytes)
                        .with_context(|| format!("parse config {}", path.display()))?;
                    cfg.seed = seed;
                    cfg
                }
                None => match preset {
                    GenPreset::Standard => synthgen::GenConfig::standard(seed),
                    GenPreset::AsymmetricOnly => synthgen::GenConfig::asymmetric_only(seed),
                },
            };
            if let Some(n) = scenes {
                cfg.scene_count = n;
            }
            if let Some(s) = zipf {
                cfg.zipf_exponent = s;
            }
            cfg.validate().map_err(|e| anyhow::anyhow!(e))?;
            let (scenes, vocab) = synthgen::generate_dataset(&cfg);
            scenedata::save_dataset(&scenes, &vocab, &out)?;
            let triples: usize = scenes.iter().map(|s| s.gt_triples.len()).sum();
            eprintln!("wrote {} scenes ({} triples) to {}", scenes.len(), triples, out.display());
            Ok(())
        }
        Command::Train { data, out, seed, epochs, lr, model } => {
            let (scenes, vocab) = load_data(&data)?;
            let mut cfg = model.resolve(None)?;
            cfg.seed = seed;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(lr) = lr {
                cfg.learning_rate = lr;
            }
            cfg.validate()?;
            let provider = provider_for(cfg.feature_dim);
            let result = relnet::train(&cfg, &scenes, &vocab, &provider)?;
            if let Some(last) = result.trace.last() {
                eprintln!(
                    "epoch {}: loss {:.4} (sc {:.4} rp {:.4} rc {:.4})",
                    result.trace.len(),
                    last.total,
                    last.sc,
                    last.rp,
                    last.rc
                );
            }
            Checkpoint::new(cfg, &vocab, result.model).save(&out)?;
            eprintln!("checkpoint written to {}", out.display());
            Ok(())
        }
        Command::Predict { model, data, out, k, frequency_prior, workers } => {
            let (scenes, vocab) = load_data(&data)?;
            let ckpt = Checkpoint::load(&model)?;
            if ckpt.vocab_hash != vocab.hash() {
                bail!(
                    "checkpoint {} was trained against a different vocabulary",
                    model.display()
                );
            }
            let cfg = &ckpt.config;
            let provider = provider_for(cfg.feature_dim);
            let freq = scoring::predicate_frequencies(&scenes, vocab.predicates.len());
            let pool = rayon_pool(workers)?;
            let preds: Vec<_> = pool.install(|| {
                use rayon::prelude::*;
                scenes
                    .par_iter()
                    .map(|scene| {
                        if frequency_prior {
                            scoring::predict_scene_frequency_prior(
                                &ckpt.model,
                                cfg,
                                scene,
                                &vocab,
                                &provider,
                                &freq,
                                k,
                            )
                        } else {
                            scoring::predict_scene(&ckpt.model, cfg, scene, &vocab, &provider, k)
                        }
                    })
                    .collect::<relnet::Result<Vec<_>>>()
            })?;
            scoring::save_predictions(&preds, &out)?;
            eprintln!("wrote predictions for {} scenes to {}", preds.len(), out.display());
            Ok(())
        }
        Command::Eval { data, preds, out, csv, ks } => {
            let (scenes, vocab) = load_data(&data)?;
            let preds = scoring::load_predictions(&preds)?;
            let ks = if ks.is_empty() { RunConfig::default().recall_ks } else { ks };
            if ks.windows(2).any(|w| w[0] >= w[1]) || ks.contains(&0) {
                bail!("recall cutoffs must be positive ascending");
            }
            let summary = metrics::evaluate(&scenes, &preds, &vocab, &ks)?;
            print!("{}", metrics::render_table(&summary));
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_string_pretty(&summary)?)
                    .with_context(|| format!("write {}", path.display()))?;
            }
            if let Some(path) = csv {
                std::fs::write(&path, metrics::render_csv(&summary))
                    .with_context(|| format!("write {}", path.display()))?;
            }
            Ok(())
        }
        Command::Augment { data, out, fraction, seed } => {
            let (mut scenes, vocab) = load_data(&data)?;
            let spec = AugmentSpec::from_vocab(&vocab, fraction, seed);
            let report =
                crate::augment::extend_dataset(&mut scenes, &spec).map_err(|e| anyhow::anyhow!(e))?;
            scenedata::save_dataset(&scenes, &vocab, &out)?;
            eprintln!(
                "added {} of {} missing implied triples ({} already present); wrote {}",
                report.added,
                report.candidates,
                report.already_present,
                out.display()
            );
            Ok(())
        }
        Command::Report { summary } => {
            let bytes = std::fs::read(&summary)
                .with_context(|| format!("read {}", summary.display()))?;
            let parsed: metrics::MetricsSummary =
                serde_json::from_slice(&bytes).with_context(|| format!("parse {}", summary.display()))?;
            print!("{}", metrics::render_table(&parsed));
            Ok(())
        }
    }
}
