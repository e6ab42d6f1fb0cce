//! Experiment runner CLI.
//!
//! Every subcommand reads an optional JSON config (all fields defaulted) and
//! applies flag overrides on top. Exit codes: 0 success, 2 configuration
//! error, 3 numerical divergence, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cbds_core::data::Split;
use cbds_core::error::Error;
use cbds_core::eval::{
    classification_accuracy, h2h, neutral_support, persuasive_support, riro_support,
    triplet_accuracy, EvalReport, EvaluatedModel, H2hMode, ReportConfig, SyntheticAgent,
};
use cbds_core::experiments::{
    ablation_filtering, ablation_triplet_count, ablation_triplet_type, alignment_histogram,
    cell_seed, reproduce_table1, run_single, train_cell, write_manifest, ExperimentConfig,
    ModelKind, ModelSpec, PreparedData, SettingContext,
};
use cbds_core::model::ReprModel;
use cbds_core::triplets::{
    derive_label_triplets, filter_inconsistent, sample_and_label, sample_intraclass,
};
use cbds_core::{Result, SimilarityOracle};

#[derive(Parser)]
#[command(
    name = "cbds",
    version,
    about = "Representation learning and decision-support experiments on the synthetic insect data"
)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

/// Flags shared by all subcommands; each overrides its config-file key.
#[derive(Args, Debug, Clone)]
struct Overrides {
    /// JSON configuration file (defaults apply for missing keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Dataset size.
    #[arg(long, global = true)]
    n: Option<usize>,

    /// Dataset seed.
    #[arg(long, global = true)]
    data_seed: Option<u64>,

    /// Oracle weights as comma-separated reals, e.g. 1,256,256,256.
    #[arg(long, global = true)]
    weights: Option<String>,

    /// Training triplet count.
    #[arg(long, global = true)]
    triplets: Option<usize>,

    /// Training epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,

    /// Loss mix for the combined model.
    #[arg(long, global = true)]
    lambda: Option<f64>,

    /// Embedding dimension.
    #[arg(long, global = true)]
    embed_dim: Option<usize>,

    /// Training seeds per cell.
    #[arg(long, global = true)]
    trials: Option<usize>,

    /// Base seed for the per-cell seed derivation.
    #[arg(long, global = true)]
    base_seed: Option<u64>,

    /// Sample to an even class split (--balance=false for natural sampling).
    #[arg(long, global = true)]
    balance: Option<bool>,

    /// Minimum distance of samples from the label boundary.
    #[arg(long, global = true)]
    margin: Option<f64>,

    /// Train the combined model on unfiltered triplets.
    #[arg(long, global = true, default_value_t = false)]
    no_filter: bool,
}

impl Overrides {
    fn build_config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(n) = self.n {
            cfg.dataset.n = n;
        }
        if let Some(seed) = self.data_seed {
            cfg.dataset.seed = seed;
        }
        if let Some(w) = &self.weights {
            cfg.oracle.weights = SimilarityOracle::parse_csv_field(w)?.weights();
        }
        if let Some(t) = self.triplets {
            cfg.triplets.n = t;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(l) = self.lambda {
            cfg.train.lambda_hc = l;
        }
        if let Some(d) = self.embed_dim {
            cfg.model.embed_dim = d;
        }
        if let Some(t) = self.trials {
            cfg.sweep.trials = t;
        }
        if let Some(s) = self.base_seed {
            cfg.sweep.base_seed = s;
        }
        if let Some(b) = self.balance {
            cfg.dataset.balance = b;
        }
        if let Some(m) = self.margin {
            cfg.dataset.margin = m;
        }
        if self.no_filter {
            cfg.triplets.filter = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset and write it as CSV.
    GenData,
    /// Sample a triplet set and write it as CSV.
    GenTriplets {
        /// human, human_filtered, label_derived or intra_class.
        #[arg(long, default_value = "human")]
        variant: String,
        /// Which split references come from: train, val or test.
        #[arg(long, default_value = "train")]
        ref_split: String,
    },
    /// Train one model (mle, tml or hc) and write checkpoint plus history.
    Train {
        /// mle, tml or hc.
        #[arg(long, default_value = "hc")]
        model: String,
        /// Trial index (selects the cell seed).
        #[arg(long, default_value_t = 0)]
        trial: usize,
    },
    /// Evaluate a trained checkpoint and write a report.
    Eval {
        /// Path to a model checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Optional baseline checkpoint for head-to-head comparisons.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Predict via nearest class centroid instead of the classifier head.
        #[arg(long, default_value_t = false)]
        centroid: bool,
        /// Report label.
        #[arg(long, default_value = "model")]
        name: String,
    },
    /// Run the full pipeline at the configured single weight setting.
    RunSingle,
    /// Reproduce the main results table across all weight settings.
    Table1,
    /// Triplet-type ablation (label-derived / intra-class / filtered).
    AblateType,
    /// Filtered-vs-unfiltered training ablation across weight settings.
    AblateFilter,
    /// Triplet-count ablation (halving down to the configured floor).
    AblateCount,
    /// Alignment scores over the power-of-two weight grid.
    AlignHist,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::from(0),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Parse { .. } => ExitCode::from(2),
                Error::Diverged { .. } => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.overrides.build_config()?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    match &cli.command {
        Command::GenData => {
            let prepared = PreparedData::prepare(&cfg)?;
            let path = cfg.output_dir.join("data.csv");
            prepared.data.save_csv(&path)?;
            let counts = prepared.data.class_counts(Split::Train);
            println!(
                "wrote {} ({} examples, train class counts {:?})",
                path.display(),
                prepared.data.len(),
                counts
            );
        }
        Command::GenTriplets { variant, ref_split } => {
            let prepared = PreparedData::prepare(&cfg)?;
            let oracle = SimilarityOracle::new(cfg.oracle.weights)?;
            let split = Split::parse(ref_split)
                .ok_or_else(|| Error::Config(format!("unknown split '{ref_split}'")))?;
            let seed = cell_seed(
                cfg.triplets.seed,
                &format!("cli-triplets;variant={variant};split={split}"),
            );
            let set = match variant.as_str() {
                "human" => sample_and_label(&prepared.data, cfg.triplets.n, split, &oracle, seed)?,
                "human_filtered" => {
                    let raw =
                        sample_and_label(&prepared.data, cfg.triplets.n, split, &oracle, seed)?;
                    filter_inconsistent(&raw, &prepared.data)?
                }
                "label_derived" => derive_label_triplets(&prepared.data, cfg.triplets.n, seed)?,
                "intra_class" => sample_intraclass(&prepared.data, cfg.triplets.n, &oracle, seed)?,
                other => return Err(Error::Config(format!("unknown variant '{other}'"))),
            };
            let path = cfg.output_dir.join(format!("triplets_{variant}.csv"));
            set.save(&path)?;
            println!("wrote {} ({} triplets)", path.display(), set.len());
        }
        Command::Train { model, trial } => {
            let kind = ModelKind::parse(model)
                .ok_or_else(|| Error::Config(format!("unknown model '{model}'")))?;
            let prepared = PreparedData::prepare(&cfg)?;
            let ctx = SettingContext::build(&cfg, &prepared, cfg.oracle.weights)?;
            let spec = ModelSpec::standard(kind, cfg.triplets.filter);
            let cell = train_cell(&cfg, &prepared, &ctx, *trial, &spec)?;
            let model_path = cfg.output_dir.join(format!("model_{kind}_{trial}.json"));
            cell.model.save(&model_path)?;
            let history_path = cfg.output_dir.join(format!("history_{kind}_{trial}.csv"));
            std::fs::write(&history_path, cell.history.to_csv())?;
            println!(
                "wrote {} and {} (best epoch {}, best val loss {:.6})",
                model_path.display(),
                history_path.display(),
                cell.history.best_epoch,
                cell.history.best_val_total_loss
            );
        }
        Command::Eval {
            model,
            baseline,
            centroid,
            name,
        } => {
            let prepared = PreparedData::prepare(&cfg)?;
            let ctx = SettingContext::build(&cfg, &prepared, cfg.oracle.weights)?;
            let agent = SyntheticAgent::new(ctx.oracle);
            let loaded = ReprModel::load(model)?;
            let strategy = if *centroid {
                cbds_core::PredictStrategy::NearestCentroid
            } else {
                cbds_core::PredictStrategy::ClassifierHead
            };
            let em = EvaluatedModel::new(&loaded, &prepared.table, strategy)?;
            let base_model;
            let (ni, no) = match baseline {
                None => (0.5, 0.5),
                Some(path) => {
                    base_model = ReprModel::load(path)?;
                    let base = EvaluatedModel::new(
                        &base_model,
                        &prepared.table,
                        cbds_core::PredictStrategy::ClassifierHead,
                    )?;
                    (
                        h2h(
                            &em,
                            &base,
                            H2hMode::NearestInClass,
                            &agent,
                            &prepared.data,
                            &prepared.table,
                        )?,
                        h2h(
                            &em,
                            &base,
                            H2hMode::NearestOtherClass,
                            &agent,
                            &prepared.data,
                            &prepared.table,
                        )?,
                    )
                }
            };
            let riro_seed = cell_seed(cfg.sweep.base_seed, "cli-eval;riro");
            let report = EvalReport {
                model: name.clone(),
                seed: cfg.sweep.base_seed,
                classification_acc: classification_accuracy(&em, &prepared.table, Split::Test)?,
                triplet_acc: triplet_accuracy(&loaded, &prepared.table, &ctx.test_set)?,
                ni_h2h: ni,
                no_h2h: no,
                neutral_ds: neutral_support(&em, &agent, &prepared.data, &prepared.table)?,
                persuasive_ds: persuasive_support(&em, &agent, &prepared.data, &prepared.table)?,
                riro_ds: riro_support(&agent, &prepared.data, riro_seed)?,
                config: ReportConfig {
                    oracle_weights: Some(ctx.weights),
                    task_alignment: Some(ctx.alignment),
                    lambda: f64::NAN,
                    triplet_variant: "external".into(),
                    embed_dim: loaded.embed_dim(),
                    dataset_seed: cfg.dataset.seed,
                    train_seed: 0,
                    eval_seed: riro_seed,
                },
            };
            let path = cfg.output_dir.join(format!("report_{name}.json"));
            report.save(&path)?;
            println!("wrote {}", path.display());
            println!("{}", report.to_json()?);
        }
        Command::RunSingle => {
            let arts = run_single(&cfg)?;
            println!(
                "wrote {} reports under {}",
                arts.reports.len(),
                arts.out_dir.display()
            );
            for r in &arts.reports {
                println!(
                    "  {}[{}]: acc={:.3} trip={:.3} neutral={:.3} persuasive={:.3}",
                    r.model,
                    r.seed,
                    r.classification_acc,
                    r.triplet_acc,
                    r.neutral_ds,
                    r.persuasive_ds
                );
            }
        }
        Command::Table1 => {
            let out = reproduce_table1(&cfg)?;
            print!("{}", out.table.to_markdown());
            println!("files under {}", cfg.output_dir.display());
        }
        Command::AblateType => {
            let out = ablation_triplet_type(&cfg)?;
            print!("{}", out.table.to_markdown());
            println!("files under {}", cfg.output_dir.display());
        }
        Command::AblateFilter => {
            let out = ablation_filtering(&cfg)?;
            print!("{}", out.table.to_markdown());
            println!("files under {}", cfg.output_dir.display());
        }
        Command::AblateCount => {
            let out = ablation_triplet_count(&cfg)?;
            print!("{}", out.table.to_markdown());
            println!("files under {}", cfg.output_dir.display());
        }
        Command::AlignHist => {
            let rows = alignment_histogram(&cfg)?;
            println!(
                "wrote {} alignment rows to {}",
                rows.len(),
                cfg.output_dir.join("alignment_histogram.csv").display()
            );
        }
    }
    // All table commands write their own manifest; cover the rest here.
    if matches!(
        cli.command,
        Command::GenData
            | Command::GenTriplets { .. }
            | Command::Train { .. }
            | Command::Eval { .. }
    ) {
        let inputs: Vec<&std::path::Path> = cli.overrides.config.as_deref().into_iter().collect();
        write_manifest(&cfg, &cfg.output_dir, command_name(&cli.command), &inputs)?;
    }
    Ok(())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData => "gen-data",
        Command::GenTriplets { .. } => "gen-triplets",
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::RunSingle => "run-single",
        Command::Table1 => "table1",
        Command::AblateType => "ablate-type",
        Command::AblateFilter => "ablate-filter",
        Command::AblateCount => "ablate-count",
        Command::AlignHist => "align-hist",
    }
}
