//! Experiment configuration: JSON-file backed, every field defaulted, every
//! cell seeded through a stable hash so adding settings never perturbs
//! existing results.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DecisionBoundary, LiftConfig};
use crate::error::{Error, Result};
use crate::eval::PredictStrategy;
use crate::model::Activation;

/// FNV-1a over the bytes of a tag; stable across platforms and releases.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seed for one experiment cell: base seed plus the hash of a descriptive tag.
pub fn cell_seed(base: u64, tag: &str) -> u64 {
    base.wrapping_add(stable_hash(tag))
}

/// The weight settings of the main results table, in published order.
pub fn default_weight_settings() -> Vec<[f64; 4]> {
    vec![
        [0.0, 0.0, 1.0, 1.0],
        [1.0, 0.0, 1.0, 1.0],
        [0.0, 1.0, 1.0, 1.0],
        [1.0, 256.0, 256.0, 256.0],
        [256.0, 1.0, 256.0, 256.0],
        [1.0, 1.0, 1.0, 1.0],
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n: usize,
    pub boundary: DecisionBoundary,
    pub ratios: (f64, f64, f64),
    pub seed: u64,
    /// Rejection-sample to an even class split. On by default for the
    /// experiment pipeline; the raw generator defaults to natural sampling.
    pub balance: bool,
    /// Keep samples at least this far from the label boundary.
    pub margin: f64,
    pub lift: Option<LiftConfig>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n: 2000,
            boundary: DecisionBoundary::Square { lo: 0.35, hi: 0.65 },
            ratios: (0.6, 0.2, 0.2),
            seed: 7,
            balance: true,
            margin: 0.08,
            lift: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    /// The single setting used by `run_single`, `gen-triplets`, `train`, `eval`.
    pub weights: [f64; 4],
    /// The sweep used by the table and ablation commands.
    pub weight_settings: Vec<[f64; 4]>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            weights: [1.0, 256.0, 256.0, 256.0],
            weight_settings: default_weight_settings(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TripletConfig {
    /// Training triplets sampled per setting.
    pub n: usize,
    /// Validation triplets (references from the val split).
    pub val_n: usize,
    /// Evaluation triplets (references from the test split).
    pub test_n: usize,
    /// Train the combined model on the filtered set.
    pub filter: bool,
    /// Base seed for triplet sampling; per-role seeds derive from it.
    pub seed: u64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig {
            n: 40_000,
            val_n: 4_000,
            test_n: 4_000,
            filter: true,
            seed: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
    pub projection_activation: Activation,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden_dims: vec![64, 64],
            embed_dim: 50,
            activation: Activation::Tanh,
            projection_activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    /// Loss mix for the combined model (the pure models pin 1 and 0).
    pub lambda_hc: f64,
    pub margin: f64,
    pub lr: f64,
    pub triplet_batch: usize,
    pub class_batch: usize,
    pub epochs: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lambda_hc: 0.5,
            margin: 1.0,
            lr: 1e-4,
            triplet_batch: 40,
            class_batch: 30,
            epochs: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    pub base_seed: u64,
    /// Training seeds per cell; reported values are means across them.
    pub trials: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            base_seed: 1234,
            trials: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub oracle: OracleConfig,
    pub triplets: TripletConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub sweep: SweepSection,
    pub output_dir: PathBuf,
    /// Smallest triplet count for the count ablation (halving from `triplets.n`).
    pub count_floor: usize,
    /// Largest exponent for the weight-search grid.
    pub align_exponent_max: u32,
    /// Warn when the weight grid exceeds this many combinations.
    pub align_budget: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            oracle: OracleConfig::default(),
            triplets: TripletConfig::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            sweep: SweepSection::default(),
            output_dir: PathBuf::from("out"),
            count_floor: 625,
            align_exponent_max: 10,
            align_budget: 25_000,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.boundary.validate()?;
        let (a, b, c) = self.dataset.ratios;
        if a <= 0.0 || b <= 0.0 || c <= 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::Config(
                "dataset ratios must be positive and sum to 1".into(),
            ));
        }
        if self.dataset.n == 0 {
            return Err(Error::Config("dataset.n must be positive".into()));
        }
        if self.dataset.margin < 0.0 {
            return Err(Error::Config("dataset.margin must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.train.lambda_hc) {
            return Err(Error::Config("train.lambda_hc must lie in [0,1]".into()));
        }
        if self.triplets.n == 0 || self.triplets.val_n == 0 || self.triplets.test_n == 0 {
            return Err(Error::Config("triplet counts must be positive".into()));
        }
        if self.sweep.trials == 0 {
            return Err(Error::Config("sweep.trials must be at least 1".into()));
        }
        if self.oracle.weight_settings.is_empty() {
            return Err(Error::Config(
                "oracle.weight_settings must be nonempty".into(),
            ));
        }
        if self.count_floor == 0 {
            return Err(Error::Config("count_floor must be positive".into()));
        }
        Ok(())
    }

    pub fn to_pretty_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// The three model families under comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Pure classification (lambda = 1).
    Mle,
    /// Pure metric learning (lambda = 0); predictions fall back to nearest
    /// class centroid since the classifier head never trains.
    Tml,
    /// The combined objective.
    Hc,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Mle => "mle",
            ModelKind::Tml => "tml",
            ModelKind::Hc => "hc",
        }
    }

    pub fn parse(s: &str) -> Option<ModelKind> {
        match s {
            "mle" => Some(ModelKind::Mle),
            "tml" => Some(ModelKind::Tml),
            "hc" => Some(ModelKind::Hc),
            _ => None,
        }
    }

    pub fn lambda(self, hc_lambda: f64) -> f64 {
        match self {
            ModelKind::Mle => 1.0,
            ModelKind::Tml => 0.0,
            ModelKind::Hc => hc_lambda,
        }
    }

    pub fn strategy(self) -> PredictStrategy {
        match self {
            ModelKind::Tml => PredictStrategy::NearestCentroid,
            _ => PredictStrategy::ClassifierHead,
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub(crate) fn weights_tag(w: &[f64; 4]) -> String {
    format!("{},{},{},{}", w[0], w[1], w[2], w[3])
}
