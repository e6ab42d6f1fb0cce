//! Experiment orchestration: configuration, the single-run pipeline, table
//! reproduction and ablation sweeps, all bit-reproducible from (config, seed).

mod config;
mod runner;
mod tables;

pub use config::{
    cell_seed, default_weight_settings, stable_hash, DatasetConfig, ExperimentConfig, ModelKind,
    ModelSection, OracleConfig, SweepSection, TrainSection, TripletConfig,
};
pub use runner::{
    run_single, run_unit, train_cell, write_manifest, CellOutcome, ModelSpec, PreparedData,
    RunArtifacts, SettingContext, TrainSetKind, TrainedCell,
};
pub use tables::{
    ablation_filtering, ablation_triplet_count, ablation_triplet_type, alignment_histogram,
    reproduce_table1, run_sweep, CellStat, CountAblationOutput, FilterAblationOutput, SweepResult,
    Table, Table1Output, TypeAblationOutput,
};
