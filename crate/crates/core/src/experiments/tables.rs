//! Table reproduction and ablation sweeps, emitted as CSV and Markdown.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::oracle::search_weights;

use super::config::{ExperimentConfig, ModelKind};
use super::runner::{
    run_unit, write_manifest, CellOutcome, ModelSpec, PreparedData, SettingContext, TrainSetKind,
};

/// Extracts one report metric from a finished cell.
type MetricFn = fn(&CellOutcome) -> f64;

/// Mean with the trial spread, the unit of every table cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellStat {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl CellStat {
    pub fn from_values(values: &[f64]) -> CellStat {
        let n = values.len().max(1) as f64;
        CellStat {
            mean: values.iter().sum::<f64>() / n,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Rows are metrics, columns are sweep points (weight settings, models or
/// triplet counts depending on the command).
#[derive(Debug, Clone)]
pub struct Table {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<CellStat>)>,
}

impl Table {
    pub fn cell(&self, row: &str, col: usize) -> Option<CellStat> {
        self.rows
            .iter()
            .find(|(name, _)| name == row)
            .and_then(|(_, cells)| cells.get(col))
            .copied()
    }

    pub fn row(&self, row: &str) -> Option<&[CellStat]> {
        self.rows
            .iter()
            .find(|(name, _)| name == row)
            .map(|(_, cells)| cells.as_slice())
    }

    /// Wide layout, means only: `metric,<col>,<col>,...`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (name, cells) in &self.rows {
            out.push_str(name);
            for cell in cells {
                out.push_str(&format!(",{:.6}", cell.mean));
            }
            out.push('\n');
        }
        out
    }

    /// Long layout with the trial spread: one row per (metric, column).
    pub fn to_cells_csv(&self) -> String {
        let mut out = String::from("metric,column,mean,min,max\n");
        for (name, cells) in &self.rows {
            for (c, cell) in cells.iter().enumerate() {
                out.push_str(&format!(
                    "{name},{},{:.6},{:.6},{:.6}\n",
                    self.columns[c], cell.mean, cell.min, cell.max
                ));
            }
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("### {}\n\n| metric |", self.title);
        for c in &self.columns {
            out.push_str(&format!(" {c} |"));
        }
        out.push_str("\n|---|");
        for _ in &self.columns {
            out.push_str("---|");
        }
        out.push('\n');
        for (name, cells) in &self.rows {
            out.push_str(&format!("| {name} |"));
            for cell in cells {
                if (cell.max - cell.min).abs() < 5e-4 {
                    out.push_str(&format!(" {:.3} |", cell.mean));
                } else {
                    out.push_str(&format!(
                        " {:.3} [{:.3}, {:.3}] |",
                        cell.mean, cell.min, cell.max
                    ));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        std::fs::write(dir.join(format!("{stem}_cells.csv")), self.to_cells_csv())?;
        std::fs::write(dir.join(format!("{stem}.md")), self.to_markdown())?;
        Ok(())
    }
}

/// Outcomes of a (settings x trials x specs) sweep.
pub struct SweepResult {
    pub settings: Vec<[f64; 4]>,
    pub alignments: Vec<f64>,
    /// Triplets removed by filtering / total sampled, per setting.
    pub filter_removed: Vec<(usize, usize)>,
    /// `cells[setting][trial][spec]`.
    pub cells: Vec<Vec<Vec<CellOutcome>>>,
}

impl SweepResult {
    /// Metric values across trials for one (setting, model name).
    pub fn metric(&self, setting: usize, name: &str, f: impl Fn(&CellOutcome) -> f64) -> Vec<f64> {
        self.cells[setting]
            .iter()
            .flat_map(|trial| trial.iter().filter(|c| c.name == name).map(&f))
            .collect()
    }

    pub fn stat(&self, setting: usize, name: &str, f: impl Fn(&CellOutcome) -> f64) -> CellStat {
        CellStat::from_values(&self.metric(setting, name, f))
    }
}

/// Run `specs` over every weight setting and trial. Units execute in
/// parallel; results keep (setting, trial) order.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    prepared: &PreparedData,
    settings: &[[f64; 4]],
    specs: &[ModelSpec],
) -> Result<SweepResult> {
    let contexts: Vec<SettingContext> = settings
        .iter()
        .map(|&w| SettingContext::build(cfg, prepared, w))
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, usize)> = (0..settings.len())
        .flat_map(|s| (0..cfg.sweep.trials).map(move |t| (s, t)))
        .collect();
    let unit_results: Vec<Result<Vec<CellOutcome>>> = jobs
        .par_iter()
        .map(|&(s, t)| run_unit(cfg, prepared, &contexts[s], t, specs))
        .collect();

    let mut cells: Vec<Vec<Vec<CellOutcome>>> = settings.iter().map(|_| Vec::new()).collect();
    for ((s, _t), result) in jobs.into_iter().zip(unit_results) {
        cells[s].push(result?);
    }
    Ok(SweepResult {
        settings: settings.to_vec(),
        alignments: contexts.iter().map(|c| c.alignment).collect(),
        filter_removed: contexts
            .iter()
            .map(|c| (c.removed_by_filter(), c.human.len()))
            .collect(),
        cells,
    })
}

fn setting_columns(sweep: &SweepResult) -> Vec<String> {
    sweep
        .settings
        .iter()
        .zip(&sweep.alignments)
        .map(|(w, a)| {
            format!(
                "w=[{}] align={:.3}",
                w.iter()
                    .map(|v| format!("{v}"))
                    .collect::<Vec<_>>()
                    .join(";"),
                a
            )
        })
        .collect()
}

pub struct Table1Output {
    pub table: Table,
    pub sweep: SweepResult,
}

/// The main results table: head-to-head and decision-support metrics for the
/// three models across all configured weight settings.
pub fn reproduce_table1(cfg: &ExperimentConfig) -> Result<Table1Output> {
    cfg.validate()?;
    let prepared = PreparedData::prepare(cfg)?;
    let specs: Vec<ModelSpec> = [ModelKind::Mle, ModelKind::Tml, ModelKind::Hc]
        .iter()
        .map(|&k| ModelSpec::standard(k, cfg.triplets.filter))
        .collect();
    let sweep = run_sweep(cfg, &prepared, &cfg.oracle.weight_settings.clone(), &specs)?;
    let table = table_from_sweep(
        &sweep,
        "Head-to-head and decision support across alignments",
    );
    std::fs::create_dir_all(&cfg.output_dir)?;
    table.write(&cfg.output_dir, "table1")?;
    write_manifest(cfg, &cfg.output_dir, "table1", &[])?;
    Ok(Table1Output { table, sweep })
}

fn table_from_sweep(sweep: &SweepResult, title: &str) -> Table {
    let mut rows = Vec::new();
    let names: Vec<String> = {
        let mut seen = Vec::new();
        for unit in sweep.cells.iter().flat_map(|s| s.iter()) {
            for cell in unit {
                if !seen.contains(&cell.name) {
                    seen.push(cell.name.clone());
                }
            }
        }
        seen
    };
    let metrics: [(&str, MetricFn); 6] = [
        ("ni_h2h", |c| c.report.ni_h2h),
        ("no_h2h", |c| c.report.no_h2h),
        ("neutral_ds", |c| c.report.neutral_ds),
        ("persuasive_ds", |c| c.report.persuasive_ds),
        ("classification_acc", |c| c.report.classification_acc),
        ("triplet_acc", |c| c.report.triplet_acc),
    ];
    for (metric, f) in metrics {
        for name in &names {
            // Against-itself head-to-head rows carry no information.
            if metric.ends_with("h2h") && name == "mle" {
                continue;
            }
            let label = if metric.ends_with("h2h") {
                format!("{metric}/{name}_vs_mle")
            } else {
                format!("{metric}/{name}")
            };
            let cells: Vec<CellStat> = (0..sweep.settings.len())
                .map(|s| sweep.stat(s, name, f))
                .collect();
            rows.push((label, cells));
        }
    }
    rows.push((
        "riro_ds".to_string(),
        (0..sweep.settings.len())
            .map(|s| sweep.stat(s, &names[0], |c| c.report.riro_ds))
            .collect(),
    ));
    Table {
        title: title.to_string(),
        columns: setting_columns(sweep),
        rows,
    }
}

pub struct TypeAblationOutput {
    pub table: Table,
    pub sweep: SweepResult,
}

/// Compare the combined model trained on label-derived, intra-class and
/// filtered human triplets at the single configured weight setting.
pub fn ablation_triplet_type(cfg: &ExperimentConfig) -> Result<TypeAblationOutput> {
    cfg.validate()?;
    let prepared = PreparedData::prepare(cfg)?;
    let specs = vec![
        ModelSpec::standard(ModelKind::Mle, cfg.triplets.filter),
        ModelSpec {
            name: "hc_label_derived".into(),
            kind: ModelKind::Hc,
            train_set: TrainSetKind::LabelDerived,
            step_budget: None,
        },
        ModelSpec {
            name: "hc_intra_class".into(),
            kind: ModelKind::Hc,
            train_set: TrainSetKind::IntraClass,
            step_budget: None,
        },
        ModelSpec {
            name: "hc_filtered".into(),
            kind: ModelKind::Hc,
            train_set: TrainSetKind::HumanFiltered,
            step_budget: None,
        },
    ];
    let sweep = run_sweep(cfg, &prepared, &[cfg.oracle.weights], &specs)?;

    let names = ["mle", "hc_label_derived", "hc_intra_class", "hc_filtered"];
    let metrics: [(&str, MetricFn); 6] = [
        ("ni_h2h_vs_mle", |c| c.report.ni_h2h),
        ("no_h2h_vs_mle", |c| c.report.no_h2h),
        ("neutral_ds", |c| c.report.neutral_ds),
        ("persuasive_ds", |c| c.report.persuasive_ds),
        ("classification_acc", |c| c.report.classification_acc),
        ("triplet_acc", |c| c.report.triplet_acc),
    ];
    let rows = metrics
        .iter()
        .map(|(metric, f)| {
            (
                metric.to_string(),
                names.iter().map(|n| sweep.stat(0, n, f)).collect(),
            )
        })
        .collect();
    let table = Table {
        title: format!(
            "Triplet-type ablation at weights [{}] (alignment {:.3})",
            cfg.oracle
                .weights
                .iter()
                .map(|v| format!("{v}"))
                .collect::<Vec<_>>()
                .join(";"),
            sweep.alignments[0]
        ),
        columns: names.iter().map(|s| s.to_string()).collect(),
        rows,
    };
    std::fs::create_dir_all(&cfg.output_dir)?;
    table.write(&cfg.output_dir, "table2")?;
    write_manifest(cfg, &cfg.output_dir, "ablate-type", &[])?;
    Ok(TypeAblationOutput { table, sweep })
}

pub struct FilterAblationOutput {
    pub table: Table,
    pub sweep: SweepResult,
}

/// Filtered vs unfiltered training across all weight settings.
pub fn ablation_filtering(cfg: &ExperimentConfig) -> Result<FilterAblationOutput> {
    cfg.validate()?;
    let prepared = PreparedData::prepare(cfg)?;
    let specs = vec![
        ModelSpec::standard(ModelKind::Mle, true),
        ModelSpec {
            name: "hc_filtered".into(),
            kind: ModelKind::Hc,
            train_set: TrainSetKind::HumanFiltered,
            step_budget: None,
        },
        ModelSpec {
            name: "hc_unfiltered".into(),
            kind: ModelKind::Hc,
            train_set: TrainSetKind::Human,
            step_budget: None,
        },
    ];
    let sweep = run_sweep(cfg, &prepared, &cfg.oracle.weight_settings.clone(), &specs)?;

    let mut rows: Vec<(String, Vec<CellStat>)> = Vec::new();
    let metrics: [(&str, MetricFn); 4] = [
        ("neutral_ds", |c| c.report.neutral_ds),
        ("persuasive_ds", |c| c.report.persuasive_ds),
        ("ni_h2h_vs_mle", |c| c.report.ni_h2h),
        ("no_h2h_vs_mle", |c| c.report.no_h2h),
    ];
    for (metric, f) in metrics {
        for name in ["hc_filtered", "hc_unfiltered"] {
            rows.push((
                format!("{metric}/{name}"),
                (0..sweep.settings.len())
                    .map(|s| sweep.stat(s, name, f))
                    .collect(),
            ));
        }
    }
    rows.push((
        "neutral_ds/mle".into(),
        (0..sweep.settings.len())
            .map(|s| sweep.stat(s, "mle", |c| c.report.neutral_ds))
            .collect(),
    ));
    rows.push((
        "filter_removed_fraction".into(),
        sweep
            .filter_removed
            .iter()
            .map(|&(removed, total)| {
                let f = removed as f64 / total.max(1) as f64;
                CellStat {
                    mean: f,
                    min: f,
                    max: f,
                }
            })
            .collect(),
    ));
    let table = Table {
        title: "Effect of filtering classification-inconsistent triplets".into(),
        columns: setting_columns(&sweep),
        rows,
    };
    std::fs::create_dir_all(&cfg.output_dir)?;
    table.write(&cfg.output_dir, "filtering")?;
    write_manifest(cfg, &cfg.output_dir, "ablate-filter", &[])?;
    Ok(FilterAblationOutput { table, sweep })
}

pub struct CountAblationOutput {
    pub table: Table,
    pub counts: Vec<usize>,
    pub sweep: SweepResult,
}

/// Halve the triplet budget repeatedly and retrain the combined model at the
/// configured weight setting. Every run gets the same total optimizer-step
/// budget so the comparison isolates triplet quantity.
pub fn ablation_triplet_count(cfg: &ExperimentConfig) -> Result<CountAblationOutput> {
    cfg.validate()?;
    if cfg.count_floor > cfg.triplets.n {
        return Err(Error::Config(
            "count_floor must not exceed triplets.n".into(),
        ));
    }
    let prepared = PreparedData::prepare(cfg)?;

    let mut counts = Vec::new();
    let mut c = cfg.triplets.n;
    while c >= cfg.count_floor {
        counts.push(c);
        if c == 1 {
            break;
        }
        c /= 2;
    }
    if counts.is_empty() {
        return Err(Error::Config("no counts at or above count_floor".into()));
    }

    let n_train_batches = prepared.data.train.len().div_ceil(cfg.train.class_batch);
    let full_spe = n_train_batches.max(cfg.triplets.n.div_ceil(cfg.train.triplet_batch));
    let budget = cfg.train.epochs * full_spe;

    let mut specs = vec![ModelSpec::standard(ModelKind::Mle, cfg.triplets.filter)];
    for &count in &counts {
        specs.push(ModelSpec {
            name: format!("hc_n{count}"),
            kind: ModelKind::Hc,
            train_set: TrainSetKind::HumanPrefix {
                count,
                filter: cfg.triplets.filter,
            },
            step_budget: Some(budget),
        });
    }
    let sweep = run_sweep(cfg, &prepared, &[cfg.oracle.weights], &specs)?;

    let metrics: [(&str, MetricFn); 4] = [
        ("ni_h2h_vs_mle", |c| c.report.ni_h2h),
        ("neutral_ds", |c| c.report.neutral_ds),
        ("persuasive_ds", |c| c.report.persuasive_ds),
        ("triplet_acc", |c| c.report.triplet_acc),
    ];
    let mut rows: Vec<(String, Vec<CellStat>)> = Vec::new();
    for (metric, f) in metrics {
        rows.push((
            format!("{metric}/hc"),
            counts
                .iter()
                .map(|count| sweep.stat(0, &format!("hc_n{count}"), f))
                .collect(),
        ));
    }
    for (metric, f) in [
        (
            "neutral_ds/mle",
            (|c| c.report.neutral_ds) as fn(&CellOutcome) -> f64,
        ),
        ("persuasive_ds/mle", |c| c.report.persuasive_ds),
    ] {
        let stat = sweep.stat(0, "mle", f);
        rows.push((metric.to_string(), counts.iter().map(|_| stat).collect()));
    }
    let table = Table {
        title: format!(
            "Triplet-count ablation at weights [{}] (alignment {:.3})",
            cfg.oracle
                .weights
                .iter()
                .map(|v| format!("{v}"))
                .collect::<Vec<_>>()
                .join(";"),
            sweep.alignments[0]
        ),
        columns: counts.iter().map(|c| format!("n={c}")).collect(),
        rows,
    };
    std::fs::create_dir_all(&cfg.output_dir)?;
    table.write(&cfg.output_dir, "counts")?;
    write_manifest(cfg, &cfg.output_dir, "ablate-count", &[])?;
    Ok(CountAblationOutput {
        table,
        counts,
        sweep,
    })
}

/// Weight-grid alignment scores for histogramming.
pub fn alignment_histogram(cfg: &ExperimentConfig) -> Result<Vec<([f64; 4], f64)>> {
    cfg.validate()?;
    let prepared = PreparedData::prepare(cfg)?;
    let results = search_weights(cfg.align_exponent_max, &prepared.data, cfg.align_budget)?;
    let mut out = String::from("w_head,w_body,w_tail,w_texture,alignment\n");
    let mut rows = Vec::with_capacity(results.len());
    for (oracle, alignment) in results {
        let w = oracle.weights();
        out.push_str(&format!(
            "{},{},{},{},{:.6}\n",
            w[0], w[1], w[2], w[3], alignment
        ));
        rows.push((w, alignment));
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    std::fs::write(cfg.output_dir.join("alignment_histogram.csv"), out)?;
    write_manifest(cfg, &cfg.output_dir, "align-hist", &[])?;
    Ok(rows)
}
