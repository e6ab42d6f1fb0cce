//! Shared fixtures for the benchmark targets.

use cbds_core::data::{
    generate_dataset_with, DecisionBoundary, FeatureTable, SampleOptions, SplitDataset,
};
use cbds_core::model::{init_model, ModelConfig, ReprModel};
use cbds_core::oracle::SimilarityOracle;
use cbds_core::triplets::{sample_and_label, TripletSet};
use cbds_core::Split;

pub struct Fixture {
    pub data: SplitDataset,
    pub table: FeatureTable,
    pub model: ReprModel,
    pub oracle: SimilarityOracle,
    pub triplets: TripletSet,
}

pub fn fixture(n: usize, embed_dim: usize) -> Fixture {
    let data = generate_dataset_with(
        n,
        DecisionBoundary::Square { lo: 0.35, hi: 0.65 },
        (0.6, 0.2, 0.2),
        7,
        SampleOptions {
            balance: true,
            margin: 0.08,
        },
    )
    .expect("fixture dataset");
    let table = FeatureTable::new(&data, None);
    let model = init_model(&ModelConfig {
        input_dim: 4,
        hidden_dims: vec![64, 64],
        embed_dim,
        activation: cbds_core::Activation::Tanh,
        projection_activation: cbds_core::Activation::Relu,
        init_seed: 0,
    })
    .expect("fixture model");
    let oracle = SimilarityOracle::new([1.0, 1.0, 1.0, 1.0]).expect("oracle");
    let triplets = sample_and_label(&data, 4000, Split::Train, &oracle, 3).expect("triplets");
    Fixture {
        data,
        table,
        model,
        oracle,
        triplets,
    }
}
