//! The single-run pipeline: data, oracle, triplets, three trained models,
//! full evaluation. Tables and ablations are built from the same cells.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::{
    generate_dataset_with, FeatureLift, FeatureTable, SampleOptions, Split, SplitDataset,
};
use crate::error::{Error, Result};
use crate::eval::{
    classification_accuracy, h2h, neutral_support, persuasive_support, riro_support,
    triplet_accuracy, EvalReport, EvaluatedModel, H2hMode, ReportConfig, SyntheticAgent,
};
use crate::model::{init_model, ModelConfig, ReprModel};
use crate::oracle::{task_alignment, SimilarityOracle};
use crate::train::{TrainConfig, TrainHistory};
use crate::triplets::{
    derive_label_triplets, filter_inconsistent, sample_and_label, sample_intraclass, TripletSet,
};

use super::config::{cell_seed, weights_tag, ExperimentConfig, ModelKind};

/// Dataset and feature table shared by every cell of a run.
pub struct PreparedData {
    pub data: SplitDataset,
    pub table: FeatureTable,
    pub lift: Option<FeatureLift>,
}

impl PreparedData {
    pub fn prepare(cfg: &ExperimentConfig) -> Result<PreparedData> {
        let data = generate_dataset_with(
            cfg.dataset.n,
            cfg.dataset.boundary,
            cfg.dataset.ratios,
            cfg.dataset.seed,
            SampleOptions {
                balance: cfg.dataset.balance,
                margin: cfg.dataset.margin,
            },
        )?;
        let lift = match &cfg.dataset.lift {
            None => None,
            Some(lc) => Some(FeatureLift::new(lc)?),
        };
        let table = FeatureTable::new(&data, lift.as_ref());
        Ok(PreparedData { data, table, lift })
    }

    pub fn model_config(&self, cfg: &ExperimentConfig, init_seed: u64) -> ModelConfig {
        ModelConfig {
            input_dim: self.table.input_dim(),
            hidden_dims: cfg.model.hidden_dims.clone(),
            embed_dim: cfg.model.embed_dim,
            activation: cfg.model.activation,
            projection_activation: cfg.model.projection_activation,
            init_seed,
        }
    }
}

/// Everything derived from one oracle weight setting.
pub struct SettingContext {
    pub weights: [f64; 4],
    pub oracle: SimilarityOracle,
    pub alignment: f64,
    /// Human-judged training triplets (references from train).
    pub human: TripletSet,
    /// The same set with classification-inconsistent triplets removed.
    pub filtered: TripletSet,
    /// Held-fixed validation triplets (references from val).
    pub val_set: TripletSet,
    /// Evaluation triplets (references from test), never filtered.
    pub test_set: TripletSet,
}

impl SettingContext {
    pub fn build(
        cfg: &ExperimentConfig,
        prepared: &PreparedData,
        weights: [f64; 4],
    ) -> Result<SettingContext> {
        let oracle = SimilarityOracle::new(weights)?;
        let alignment = task_alignment(&oracle, &prepared.data)?;
        let tag = weights_tag(&weights);
        let human = sample_and_label(
            &prepared.data,
            cfg.triplets.n,
            Split::Train,
            &oracle,
            cell_seed(cfg.triplets.seed, &format!("triplets;w={tag};role=train")),
        )?;
        let filtered = filter_inconsistent(&human, &prepared.data)?;
        let val_set = sample_and_label(
            &prepared.data,
            cfg.triplets.val_n,
            Split::Val,
            &oracle,
            cell_seed(cfg.triplets.seed, &format!("triplets;w={tag};role=val")),
        )?;
        let test_set = sample_and_label(
            &prepared.data,
            cfg.triplets.test_n,
            Split::Test,
            &oracle,
            cell_seed(cfg.triplets.seed, &format!("triplets;w={tag};role=test")),
        )?;
        Ok(SettingContext {
            weights,
            oracle,
            alignment,
            human,
            filtered,
            val_set,
            test_set,
        })
    }

    pub fn removed_by_filter(&self) -> usize {
        self.human.len() - self.filtered.len()
    }
}

/// Which triplet set a model trains on.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainSetKind {
    /// The raw human set (also paces the pure classifier for step parity).
    Human,
    HumanFiltered,
    LabelDerived,
    IntraClass,
    /// Deterministic prefix of the human set, optionally filtered after
    /// truncation: the triplet-count ablation.
    HumanPrefix {
        count: usize,
        filter: bool,
    },
}

/// One model to train and evaluate inside a unit.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    /// Report label, e.g. "hc" or "hc_label_derived".
    pub name: String,
    pub kind: ModelKind,
    pub train_set: TrainSetKind,
    /// Total optimizer steps to spread over epochs; `None` keeps the
    /// configured epoch count as-is.
    pub step_budget: Option<usize>,
}

impl ModelSpec {
    pub fn standard(kind: ModelKind, filter: bool) -> ModelSpec {
        ModelSpec {
            name: kind.name().to_string(),
            kind,
            train_set: match kind {
                ModelKind::Hc if filter => TrainSetKind::HumanFiltered,
                _ => TrainSetKind::Human,
            },
            step_budget: None,
        }
    }
}

/// A fully evaluated (model, trial) cell.
pub struct CellOutcome {
    pub name: String,
    pub trial: usize,
    pub report: EvalReport,
    pub history: TrainHistory,
    pub model: ReprModel,
}

fn resolve_train_set(
    cfg: &ExperimentConfig,
    prepared: &PreparedData,
    ctx: &SettingContext,
    kind: &TrainSetKind,
) -> Result<TripletSet> {
    let tag = weights_tag(&ctx.weights);
    match kind {
        TrainSetKind::Human => Ok(ctx.human.clone()),
        TrainSetKind::HumanFiltered => Ok(ctx.filtered.clone()),
        TrainSetKind::LabelDerived => derive_label_triplets(
            &prepared.data,
            cfg.triplets.n,
            cell_seed(
                cfg.triplets.seed,
                &format!("triplets;w={tag};role=label_derived"),
            ),
        ),
        TrainSetKind::IntraClass => sample_intraclass(
            &prepared.data,
            cfg.triplets.n,
            &ctx.oracle,
            cell_seed(
                cfg.triplets.seed,
                &format!("triplets;w={tag};role=intra_class"),
            ),
        ),
        TrainSetKind::HumanPrefix { count, filter } => {
            if *count > ctx.human.len() {
                return Err(Error::Config(format!(
                    "prefix count {count} exceeds the sampled set of {}",
                    ctx.human.len()
                )));
            }
            let mut subset = ctx.human.clone();
            subset.triplets.truncate(*count);
            if *filter {
                filter_inconsistent(&subset, &prepared.data)
            } else {
                Ok(subset)
            }
        }
    }
}

/// Steps one epoch takes under the interleaving rule: the longer active
/// stream is seen once per epoch.
fn steps_per_epoch(
    cfg: &ExperimentConfig,
    lambda: f64,
    n_triplets: usize,
    n_train: usize,
) -> usize {
    let class_batches = if lambda > 0.0 {
        n_train.div_ceil(cfg.train.class_batch)
    } else {
        0
    };
    let triplet_batches = if n_triplets > 0 {
        n_triplets.div_ceil(cfg.train.triplet_batch)
    } else {
        0
    };
    class_batches.max(triplet_batches)
}

/// A trained cell before evaluation.
pub struct TrainedCell {
    pub model: ReprModel,
    pub history: TrainHistory,
    pub train_set_variant: String,
    pub train_set_len: usize,
    pub lambda: f64,
}

/// Train one model spec for one trial, with per-cell seeds derived from the
/// sweep base seed.
pub fn train_cell(
    cfg: &ExperimentConfig,
    prepared: &PreparedData,
    ctx: &SettingContext,
    trial: usize,
    spec: &ModelSpec,
) -> Result<TrainedCell> {
    let tag = weights_tag(&ctx.weights);
    let lambda = spec.kind.lambda(cfg.train.lambda_hc);
    let train_set = resolve_train_set(cfg, prepared, ctx, &spec.train_set)?;
    let spe = steps_per_epoch(cfg, lambda, train_set.len(), prepared.data.train.len());
    let (epochs, val_every) = match spec.step_budget {
        None => (cfg.train.epochs, 1),
        Some(budget) => {
            let epochs = budget.div_ceil(spe.max(1)).max(1);
            (epochs, epochs.div_ceil(cfg.train.epochs).max(1))
        }
    };
    let seed_tag = format!("model={};w={tag};trial={trial}", spec.name);
    let model_cfg = prepared.model_config(
        cfg,
        cell_seed(cfg.sweep.base_seed, &format!("init;{seed_tag}")),
    );
    let initial = init_model(&model_cfg)?;
    let tcfg = TrainConfig {
        lambda,
        margin: cfg.train.margin,
        lr: cfg.train.lr,
        triplet_batch: cfg.train.triplet_batch,
        class_batch: cfg.train.class_batch,
        epochs,
        seed: cell_seed(cfg.sweep.base_seed, &format!("train;{seed_tag}")),
    };
    let (model, history) = crate::train::train_with_val_every(
        &initial,
        &prepared.table,
        &train_set,
        &ctx.val_set,
        &tcfg,
        val_every,
    )?;
    Ok(TrainedCell {
        model,
        history,
        train_set_variant: train_set.variant.name().to_string(),
        train_set_len: train_set.len(),
        lambda,
    })
}

/// Train and evaluate every spec for one (setting, trial); the pure
/// classifier is always trained first as the head-to-head baseline.
pub fn run_unit(
    cfg: &ExperimentConfig,
    prepared: &PreparedData,
    ctx: &SettingContext,
    trial: usize,
    specs: &[ModelSpec],
) -> Result<Vec<CellOutcome>> {
    let tag = weights_tag(&ctx.weights);
    let agent = SyntheticAgent::new(ctx.oracle);
    let riro_seed = cell_seed(cfg.sweep.base_seed, &format!("riro;w={tag};trial={trial}"));

    // Baseline for head-to-head comparisons.
    let mle_spec = specs
        .iter()
        .find(|s| s.kind == ModelKind::Mle)
        .cloned()
        .unwrap_or_else(|| ModelSpec::standard(ModelKind::Mle, cfg.triplets.filter));
    let mle_cell = train_cell(cfg, prepared, ctx, trial, &mle_spec)?;
    let mle_eval =
        EvaluatedModel::new(&mle_cell.model, &prepared.table, ModelKind::Mle.strategy())?;

    let riro = riro_support(&agent, &prepared.data, riro_seed)?;

    let mut outcomes = Vec::with_capacity(specs.len());
    for spec in specs {
        let is_mle = spec.kind == ModelKind::Mle && spec.name == mle_spec.name;
        let cell = if is_mle {
            TrainedCell {
                model: mle_cell.model.clone(),
                history: mle_cell.history.clone(),
                train_set_variant: mle_cell.train_set_variant.clone(),
                train_set_len: mle_cell.train_set_len,
                lambda: mle_cell.lambda,
            }
        } else {
            train_cell(cfg, prepared, ctx, trial, spec)?
        };
        let (model, history, lambda) = (cell.model, cell.history, cell.lambda);
        let train_set_variant = cell.train_set_variant;
        let em = EvaluatedModel::new(&model, &prepared.table, spec.kind.strategy())?;
        let (ni, no) = if is_mle {
            (0.5, 0.5) // a model against itself is exactly even
        } else {
            (
                h2h(
                    &em,
                    &mle_eval,
                    H2hMode::NearestInClass,
                    &agent,
                    &prepared.data,
                    &prepared.table,
                )?,
                h2h(
                    &em,
                    &mle_eval,
                    H2hMode::NearestOtherClass,
                    &agent,
                    &prepared.data,
                    &prepared.table,
                )?,
            )
        };
        let report = EvalReport {
            model: spec.name.clone(),
            seed: cell_seed(
                cfg.sweep.base_seed,
                &format!("train;model={};w={tag};trial={trial}", spec.name),
            ),
            classification_acc: classification_accuracy(&em, &prepared.table, Split::Test)?,
            triplet_acc: triplet_accuracy(&model, &prepared.table, &ctx.test_set)?,
            ni_h2h: ni,
            no_h2h: no,
            neutral_ds: neutral_support(&em, &agent, &prepared.data, &prepared.table)?,
            persuasive_ds: persuasive_support(&em, &agent, &prepared.data, &prepared.table)?,
            riro_ds: riro,
            config: ReportConfig {
                oracle_weights: Some(ctx.weights),
                task_alignment: Some(ctx.alignment),
                lambda,
                triplet_variant: train_set_variant,
                embed_dim: cfg.model.embed_dim,
                dataset_seed: cfg.dataset.seed,
                train_seed: cell_seed(
                    cfg.sweep.base_seed,
                    &format!("train;model={};w={tag};trial={trial}", spec.name),
                ),
                eval_seed: riro_seed,
            },
        };
        report.validate()?;
        outcomes.push(CellOutcome {
            name: spec.name.clone(),
            trial,
            report,
            history,
            model,
        });
    }
    Ok(outcomes)
}

/// Run every trial of one setting in parallel.
pub fn run_setting(
    cfg: &ExperimentConfig,
    prepared: &PreparedData,
    ctx: &SettingContext,
    specs: &[ModelSpec],
) -> Result<Vec<Vec<CellOutcome>>> {
    (0..cfg.sweep.trials)
        .into_par_iter()
        .map(|trial| run_unit(cfg, prepared, ctx, trial, specs))
        .collect()
}

/// Artifacts written by `run_single`.
pub struct RunArtifacts {
    pub reports: Vec<EvalReport>,
    pub out_dir: PathBuf,
}

/// The full pipeline at the configured single weight setting: generate data,
/// sample and filter triplets, train the three models over all trials, and
/// write datasets, models, histories and reports under the output directory.
pub fn run_single(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(out.join("models"))?;
    std::fs::create_dir_all(out.join("reports"))?;

    let prepared = PreparedData::prepare(cfg)?;
    let ctx = SettingContext::build(cfg, &prepared, cfg.oracle.weights)?;

    prepared.data.save_csv(&out.join("data.csv"))?;
    ctx.human.save(&out.join("triplets_human.csv"))?;
    ctx.filtered.save(&out.join("triplets_filtered.csv"))?;
    ctx.val_set.save(&out.join("triplets_val.csv"))?;
    ctx.test_set.save(&out.join("triplets_test.csv"))?;

    let specs: Vec<ModelSpec> = [ModelKind::Mle, ModelKind::Tml, ModelKind::Hc]
        .iter()
        .map(|&k| ModelSpec::standard(k, cfg.triplets.filter))
        .collect();
    let units = run_setting(cfg, &prepared, &ctx, &specs)?;

    let mut reports = Vec::new();
    for unit in &units {
        for cell in unit {
            let stem = format!("{}_{}", cell.name, cell.trial);
            cell.model
                .save(&out.join("models").join(format!("model_{stem}.json")))?;
            std::fs::write(
                out.join(format!("history_{stem}.csv")),
                cell.history.to_csv(),
            )?;
            cell.report
                .save(&out.join("reports").join(format!("report_{stem}.json")))?;
            reports.push(cell.report.clone());
        }
    }
    write_manifest(cfg, &out, "run-single", &[])?;
    Ok(RunArtifacts {
        reports,
        out_dir: out,
    })
}

/// Run manifest: config echo plus content hashes of any input files.
pub fn write_manifest(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    command: &str,
    input_files: &[&Path],
) -> Result<()> {
    #[derive(Serialize)]
    struct Manifest<'a> {
        command: &'a str,
        config: &'a ExperimentConfig,
        input_hashes: Vec<(String, String)>,
    }
    let mut input_hashes = Vec::new();
    for path in input_files {
        let bytes = std::fs::read(path)?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        let digest = hasher.finalize();
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        input_hashes.push((path.display().to_string(), hex));
    }
    let manifest = Manifest {
        command,
        config: cfg,
        input_hashes,
    };
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(())
}
