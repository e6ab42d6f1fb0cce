//! Simulated human similarity metrics.
//!
//! A synthetic human is a weighted Euclidean distance over the four visual
//! features: `d(a, b) = sqrt(sum_i w_i (a_i - b_i)^2)`. Zeroing the weights of
//! the informative features yields a human whose judgments carry no label
//! signal; the task-alignment score quantifies the agreement in between.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{InsectExample, Split, SplitDataset, NUM_FEATURES};
use crate::error::{Error, Result};

/// Weight vector defining one simulated human metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityOracle {
    weights: [f64; NUM_FEATURES],
}

impl SimilarityOracle {
    pub fn new(weights: [f64; NUM_FEATURES]) -> Result<SimilarityOracle> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!(
                "oracle weights must be finite and nonnegative, got {weights:?}"
            )));
        }
        if weights.iter().all(|w| *w == 0.0) {
            return Err(Error::Config("oracle weights must not be all zero".into()));
        }
        Ok(SimilarityOracle { weights })
    }

    pub fn weights(&self) -> [f64; NUM_FEATURES] {
        self.weights
    }

    /// Comma-separated form used on the command line and in file headers.
    pub fn to_csv_field(&self) -> String {
        self.weights
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn parse_csv_field(s: &str) -> Result<SimilarityOracle> {
        let parts: Vec<&str> = s.split(',').collect();
        if parts.len() != NUM_FEATURES {
            return Err(Error::Config(format!(
                "expected {NUM_FEATURES} comma-separated weights, got '{s}'"
            )));
        }
        let mut weights = [0.0; NUM_FEATURES];
        for (w, p) in weights.iter_mut().zip(&parts) {
            *w = p
                .trim()
                .parse()
                .map_err(|e| Error::Config(format!("bad weight '{p}': {e}")))?;
        }
        SimilarityOracle::new(weights)
    }
}

/// The simulated human metric.
pub fn human_distance(a: &InsectExample, b: &InsectExample, o: &SimilarityOracle) -> f64 {
    human_distance_sq(a, b, o).sqrt()
}

fn human_distance_sq(a: &InsectExample, b: &InsectExample, o: &SimilarityOracle) -> f64 {
    let fa = a.features();
    let fb = b.features();
    let mut acc = 0.0;
    for i in 0..NUM_FEATURES {
        let d = fa[i] - fb[i];
        acc += o.weights[i] * d * d;
    }
    acc
}

/// Outcome of one two-alternative forced choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Judgment {
    /// True when the first candidate was chosen.
    pub first: bool,
    /// Exact distance tie, resolved in favor of the first candidate.
    pub tie: bool,
}

/// Which of two candidates the simulated human finds closer to the reference.
pub fn judge_triplet(
    reference: &InsectExample,
    c1: &InsectExample,
    c2: &InsectExample,
    o: &SimilarityOracle,
) -> Judgment {
    let d1 = human_distance_sq(reference, c1, o);
    let d2 = human_distance_sq(reference, c2, o);
    Judgment {
        first: d1 <= d2,
        tie: d1 == d2,
    }
}

/// 1-NN classification accuracy of the simulated human: each test example is
/// assigned the label of its nearest train example under `human_distance`.
/// Neighbor ties break toward the lowest train id.
pub fn task_alignment(o: &SimilarityOracle, data: &SplitDataset) -> Result<f64> {
    let counts = data.class_counts(Split::Train);
    if counts.contains(&0) {
        return Err(Error::DegenerateData(
            "task alignment needs both classes in the train split".into(),
        ));
    }
    if data.test.is_empty() {
        return Err(Error::DegenerateData("empty test split".into()));
    }
    let hits: usize = data
        .test
        .par_iter()
        .map(|x| {
            let nn = nearest_train(x, data, o);
            usize::from(nn.label == x.label)
        })
        .sum();
    Ok(hits as f64 / data.test.len() as f64)
}

fn nearest_train<'a>(
    x: &InsectExample,
    data: &'a SplitDataset,
    o: &SimilarityOracle,
) -> &'a InsectExample {
    data.train
        .iter()
        .map(|t| (human_distance_sq(x, t, o), t.id, t))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .expect("nonempty train split")
        .2
}

/// Enumerate weight vectors with components in `{0} ∪ {2^0 .. 2^exponent_max}`
/// (all-zero excluded) and score each by task alignment.
pub fn search_weights(
    exponent_max: u32,
    data: &SplitDataset,
    budget: usize,
) -> Result<Vec<(SimilarityOracle, f64)>> {
    let mut values = vec![0.0f64];
    for e in 0..=exponent_max {
        values.push((2.0f64).powi(e as i32));
    }
    let grid = values.len().pow(4) - 1;
    if grid > budget {
        log::warn!("weight grid has {grid} combinations, over the budget of {budget}");
    }

    let mut combos = Vec::with_capacity(grid);
    for &a in &values {
        for &b in &values {
            for &c in &values {
                for &d in &values {
                    if a == 0.0 && b == 0.0 && c == 0.0 && d == 0.0 {
                        continue;
                    }
                    combos.push([a, b, c, d]);
                }
            }
        }
    }
    combos
        .par_iter()
        .map(|&w| {
            let oracle = SimilarityOracle::new(w)?;
            let score = task_alignment(&oracle, data)?;
            Ok((oracle, score))
        })
        .collect()
}
