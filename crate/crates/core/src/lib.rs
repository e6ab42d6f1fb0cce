//! Representation learning for case-based decision support, evaluated with a
//! simulated human.
//!
//! The crate builds a small end-to-end laboratory:
//!
//! - [`data`]: the parametric "Vespula vs Weevil" dataset with configurable
//!   decision boundaries and deterministic splits,
//! - [`oracle`]: simulated humans as weighted Euclidean metrics over the
//!   visual features, plus the task-alignment score,
//! - [`triplets`]: triplet sampling, labeling, filtering and persistence,
//! - [`model`]: a small feed-forward representation model (encoder,
//!   projection head, classification head) with explicit parameters,
//! - [`train`]: joint cross-entropy + triplet-margin training with manual
//!   backpropagation and Adam,
//! - [`eval`]: head-to-head, neutral/persuasive and RIRO decision-support
//!   protocols driven by a synthetic agent,
//! - [`experiments`]: reproducible experiment orchestration and table
//!   emission.

pub mod data;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod model;
pub mod oracle;
pub mod train;
pub mod triplets;

pub use data::{
    assign_label, generate_dataset, generate_dataset_with, DecisionBoundary, FeatureLift,
    FeatureTable, InsectExample, Label, LiftConfig, SampleOptions, Split, SplitDataset,
};
pub use error::{Error, Result};
pub use eval::{EmbeddingIndex, EvalReport, PredictStrategy, SyntheticAgent};
pub use model::{Activation, ModelConfig, ReprModel};
pub use oracle::{human_distance, judge_triplet, search_weights, task_alignment, SimilarityOracle};
pub use train::{train, TrainConfig, TrainHistory};
pub use triplets::{
    derive_label_triplets, filter_inconsistent, sample_and_label, sample_intraclass, Triplet,
    TripletSet, TripletVariant,
};
