//! Evaluation protocols: classification and triplet accuracy, head-to-head
//! retrieval comparisons, and neutral / persuasive / RIRO decision support
//! with a synthetic agent standing in for the human.
//!
//! The agent always judges raw visual features with its own metric; models
//! only control which candidates get shown.

use ndarray::{Array2, ArrayView1, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureTable, InsectExample, Label, Split, SplitDataset};
use crate::error::{Error, Result};
use crate::model::ReprModel;
use crate::oracle::{human_distance, SimilarityOracle};
use crate::triplets::TripletSet;

/// How a model produces class predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictStrategy {
    /// Softmax over the trained classifier head.
    ClassifierHead,
    /// Nearest class centroid in embedding space; the fallback for models
    /// trained without a usable classifier (pure metric learning).
    NearestCentroid,
}

/// Train-split embeddings under one model, with labels and lookup tables.
#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    pub embeddings: Array2<f64>,
    pub labels: Vec<Label>,
    pub ids: Vec<u32>,
    class_rows: [Vec<usize>; 2],
    centroids: Array2<f64>,
}

impl EmbeddingIndex {
    pub fn build(model: &ReprModel, table: &FeatureTable) -> Result<EmbeddingIndex> {
        let embeddings = model.embed_batch(table.x(Split::Train))?;
        let labels = table.labels(Split::Train).to_vec();
        let ids = table.ids(Split::Train).to_vec();
        let mut class_rows: [Vec<usize>; 2] = [vec![], vec![]];
        for (row, lab) in labels.iter().enumerate() {
            class_rows[lab.index()].push(row);
        }
        let mut centroids = Array2::zeros((2, embeddings.ncols()));
        for (c, rows) in class_rows.iter().enumerate() {
            if !rows.is_empty() {
                for &row in rows {
                    let mut cr = centroids.row_mut(c);
                    cr += &embeddings.row(row);
                }
                let mut cr = centroids.row_mut(c);
                cr /= rows.len() as f64;
            }
        }
        Ok(EmbeddingIndex {
            embeddings,
            labels,
            ids,
            class_rows,
            centroids,
        })
    }

    pub fn class_size(&self, label: Label) -> usize {
        self.class_rows[label.index()].len()
    }
}

/// A trained model bundled with its embedding index and prediction strategy.
pub struct EvaluatedModel<'a> {
    pub model: &'a ReprModel,
    pub index: EmbeddingIndex,
    pub strategy: PredictStrategy,
}

impl<'a> EvaluatedModel<'a> {
    pub fn new(
        model: &'a ReprModel,
        table: &FeatureTable,
        strategy: PredictStrategy,
    ) -> Result<EvaluatedModel<'a>> {
        Ok(EvaluatedModel {
            model,
            index: EmbeddingIndex::build(model, table)?,
            strategy,
        })
    }

    /// Predicted labels for a whole split.
    pub fn predict_split(&self, table: &FeatureTable, split: Split) -> Result<Vec<Label>> {
        let e = self.model.embed_batch(table.x(split))?;
        Ok((0..e.nrows())
            .map(|i| self.predict_from_embedding(e.row(i)))
            .collect())
    }

    pub fn predict_from_embedding(&self, e: ArrayView1<'_, f64>) -> Label {
        match self.strategy {
            PredictStrategy::ClassifierHead => {
                let logits = self
                    .model
                    .logits_from_embedding(e.insert_axis(Axis(0)))
                    .remove_axis(Axis(0));
                if logits[1] > logits[0] {
                    Label::Weevil
                } else {
                    Label::Vespula
                }
            }
            PredictStrategy::NearestCentroid => {
                let d0 = sq_distance(e, self.index.centroids.row(0));
                let d1 = sq_distance(e, self.index.centroids.row(1));
                if d1 < d0 {
                    Label::Weevil
                } else {
                    Label::Vespula
                }
            }
        }
    }
}

fn sq_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Fraction of a split predicted correctly.
pub fn classification_accuracy(
    em: &EvaluatedModel<'_>,
    table: &FeatureTable,
    split: Split,
) -> Result<f64> {
    let labels = table.labels(split);
    if labels.is_empty() {
        return Err(Error::DegenerateData(format!("empty split {split}")));
    }
    let preds = em.predict_split(table, split)?;
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Fraction of triplets where the model places the positive strictly closer
/// to the reference than the negative. Distance ties count as incorrect.
pub fn triplet_accuracy(model: &ReprModel, table: &FeatureTable, set: &TripletSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Config("triplet accuracy over an empty set".into()));
    }
    let n = set.len();
    let dim = table.input_dim();
    let mut refs = Array2::zeros((n, dim));
    let mut poss = Array2::zeros((n, dim));
    let mut negs = Array2::zeros((n, dim));
    for (i, t) in set.triplets.iter().enumerate() {
        let (rs, rrow) = table.locate(t.ref_id).ok_or(Error::UnknownId(t.ref_id))?;
        refs.row_mut(i).assign(&table.row(rs, rrow));
        poss.row_mut(i)
            .assign(&table.row(Split::Train, table.train_row(t.pos_id)?));
        negs.row_mut(i)
            .assign(&table.row(Split::Train, table.train_row(t.neg_id)?));
    }
    let er = model.embed_batch(refs.view())?;
    let ep = model.embed_batch(poss.view())?;
    let en = model.embed_batch(negs.view())?;
    let mut hits = 0usize;
    for i in 0..n {
        let dp = sq_distance(er.row(i), ep.row(i));
        let dn = sq_distance(er.row(i), en.row(i));
        if dp < dn {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Train row nearest to the query embedding within a class; embedding ties
/// break toward the lowest example id.
pub fn nearest_in_class(
    index: &EmbeddingIndex,
    query: ArrayView1<'_, f64>,
    class: Label,
) -> Result<usize> {
    extreme_in_class(index, query, class, true)
}

/// Train row furthest from the query embedding within a class.
pub fn furthest_in_class(
    index: &EmbeddingIndex,
    query: ArrayView1<'_, f64>,
    class: Label,
) -> Result<usize> {
    extreme_in_class(index, query, class, false)
}

fn extreme_in_class(
    index: &EmbeddingIndex,
    query: ArrayView1<'_, f64>,
    class: Label,
    nearest: bool,
) -> Result<usize> {
    let rows = &index.class_rows[class.index()];
    if rows.is_empty() {
        return Err(Error::DegenerateData(format!(
            "no train examples with label {class:?}"
        )));
    }
    let mut best_row = rows[0];
    let mut best_key = (f64::INFINITY, u32::MAX);
    for &row in rows {
        let d = sq_distance(query, index.embeddings.row(row));
        let d = if nearest { d } else { -d };
        let key = (d, index.ids[row]);
        if key.0 < best_key.0 || (key.0 == best_key.0 && key.1 < best_key.1) {
            best_key = key;
            best_row = row;
        }
    }
    Ok(best_row)
}

/// The simulated decision maker: picks the candidate closest under its own
/// metric and answers with that candidate's label.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticAgent {
    pub oracle: SimilarityOracle,
}

impl SyntheticAgent {
    pub fn new(oracle: SimilarityOracle) -> SyntheticAgent {
        SyntheticAgent { oracle }
    }

    /// Choose among labeled candidates; distance ties resolve to the earliest
    /// candidate (callers order candidates by class index).
    pub fn pick(
        &self,
        x: &InsectExample,
        candidates: &[(&InsectExample, Label)],
    ) -> (usize, bool) {
        debug_assert!(!candidates.is_empty());
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        let mut tie = false;
        for (i, (cand, _)) in candidates.iter().enumerate() {
            let d = human_distance(x, cand, &self.oracle);
            if d < best_d {
                best_d = d;
                best = i;
                tie = false;
            } else if d == best_d {
                tie = true;
            }
        }
        (best, tie)
    }
}

/// Head-to-head mode: compare nearest examples in each model's predicted
/// class, or in the other class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum H2hMode {
    NearestInClass,
    NearestOtherClass,
}

/// For each test instance both models nominate a candidate; the agent says
/// which is closer. Returns the fraction of rounds won by `a` (identical
/// candidates and exact distance ties count one half).
pub fn h2h(
    a: &EvaluatedModel<'_>,
    b: &EvaluatedModel<'_>,
    mode: H2hMode,
    agent: &SyntheticAgent,
    data: &SplitDataset,
    table: &FeatureTable,
) -> Result<f64> {
    if data.test.is_empty() {
        return Err(Error::DegenerateData("empty test split".into()));
    }
    let ea = a.model.embed_batch(table.x(Split::Test))?;
    let eb = b.model.embed_batch(table.x(Split::Test))?;
    let mut score = 0.0;
    for (i, x) in data.test.iter().enumerate() {
        let ya = a.predict_from_embedding(ea.row(i));
        let yb = b.predict_from_embedding(eb.row(i));
        let (ca, cb) = match mode {
            H2hMode::NearestInClass => (ya, yb),
            H2hMode::NearestOtherClass => (ya.other(), yb.other()),
        };
        let row_a = nearest_in_class(&a.index, ea.row(i), ca)?;
        let row_b = nearest_in_class(&b.index, eb.row(i), cb)?;
        let id_a = a.index.ids[row_a];
        let id_b = b.index.ids[row_b];
        if id_a == id_b {
            score += 0.5;
            continue;
        }
        let cand_a = data.train_by_id(id_a).ok_or(Error::UnknownId(id_a))?;
        let cand_b = data.train_by_id(id_b).ok_or(Error::UnknownId(id_b))?;
        let da = human_distance(x, cand_a, &agent.oracle);
        let db = human_distance(x, cand_b, &agent.oracle);
        score += if da < db {
            1.0
        } else if da > db {
            0.0
        } else {
            0.5
        };
    }
    Ok(score / data.test.len() as f64)
}

/// Neutral decision support: show the nearest train example of every class
/// (groundtruth classes, no prediction); the agent answers with the label of
/// the candidate it finds closest. Returns agent accuracy.
pub fn neutral_support(
    em: &EvaluatedModel<'_>,
    agent: &SyntheticAgent,
    data: &SplitDataset,
    table: &FeatureTable,
) -> Result<f64> {
    if data.test.is_empty() {
        return Err(Error::DegenerateData("empty test split".into()));
    }
    let e_test = em.model.embed_batch(table.x(Split::Test))?;
    let mut hits = 0usize;
    let mut ties = 0usize;
    for (i, x) in data.test.iter().enumerate() {
        let mut candidates = Vec::with_capacity(2);
        for class in Label::ALL {
            let row = nearest_in_class(&em.index, e_test.row(i), class)?;
            let id = em.index.ids[row];
            candidates.push((data.train_by_id(id).ok_or(Error::UnknownId(id))?, class));
        }
        let (pick, tie) = agent.pick(x, &candidates);
        ties += usize::from(tie);
        if candidates[pick].1 == x.label {
            hits += 1;
        }
    }
    if ties > 0 {
        log::debug!("neutral support: {ties} agent distance ties (lowest class kept)");
    }
    Ok(hits as f64 / data.test.len() as f64)
}

/// Persuasive decision support: show the nearest example in the predicted
/// class and the furthest example from the other class.
pub fn persuasive_support(
    em: &EvaluatedModel<'_>,
    agent: &SyntheticAgent,
    data: &SplitDataset,
    table: &FeatureTable,
) -> Result<f64> {
    if data.test.is_empty() {
        return Err(Error::DegenerateData("empty test split".into()));
    }
    let e_test = em.model.embed_batch(table.x(Split::Test))?;
    let mut hits = 0usize;
    for (i, x) in data.test.iter().enumerate() {
        let predicted = em.predict_from_embedding(e_test.row(i));
        let near_row = nearest_in_class(&em.index, e_test.row(i), predicted)?;
        let far_row = furthest_in_class(&em.index, e_test.row(i), predicted.other())?;
        let near_id = em.index.ids[near_row];
        let far_id = em.index.ids[far_row];
        let mut candidates = vec![
            (
                data.train_by_id(near_id).ok_or(Error::UnknownId(near_id))?,
                predicted,
            ),
            (
                data.train_by_id(far_id).ok_or(Error::UnknownId(far_id))?,
                predicted.other(),
            ),
        ];
        // Order by class index so agent ties resolve to the lowest class.
        candidates.sort_by_key(|(_, lab)| lab.index());
        let (pick, _) = agent.pick(x, &candidates);
        if candidates[pick].1 == x.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.test.len() as f64)
}

/// Random in-class random out-of-class baseline: one uniformly random train
/// example per class. Draws are keyed by example id, so the metric does not
/// depend on test-set order.
pub fn riro_support(agent: &SyntheticAgent, data: &SplitDataset, seed: u64) -> Result<f64> {
    if data.test.is_empty() {
        return Err(Error::DegenerateData("empty test split".into()));
    }
    let mut by_class: [Vec<&InsectExample>; 2] = [vec![], vec![]];
    for e in &data.train {
        by_class[e.label.index()].push(e);
    }
    if by_class.iter().any(|c| c.is_empty()) {
        return Err(Error::DegenerateData(
            "riro needs both classes in the train split".into(),
        ));
    }
    let mut hits = 0usize;
    for x in &data.test {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ u64::from(x.id).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut candidates = Vec::with_capacity(2);
        for class in Label::ALL {
            let members = &by_class[class.index()];
            candidates.push((members[rng.random_range(0..members.len())], class));
        }
        let (pick, _) = agent.pick(x, &candidates);
        if candidates[pick].1 == x.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.test.len() as f64)
}

/// Everything measured for one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub seed: u64,
    pub classification_acc: f64,
    pub triplet_acc: f64,
    pub ni_h2h: f64,
    pub no_h2h: f64,
    pub neutral_ds: f64,
    pub persuasive_ds: f64,
    pub riro_ds: f64,
    pub config: ReportConfig,
}

/// Echo of the configuration a report was produced under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub oracle_weights: Option<[f64; 4]>,
    pub task_alignment: Option<f64>,
    pub lambda: f64,
    pub triplet_variant: String,
    pub embed_dim: usize,
    pub dataset_seed: u64,
    pub train_seed: u64,
    pub eval_seed: u64,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let metrics = [
            self.classification_acc,
            self.triplet_acc,
            self.ni_h2h,
            self.no_h2h,
            self.neutral_ds,
            self.persuasive_ds,
            self.riro_ds,
        ];
        if metrics.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Config(format!(
                "metrics outside [0,1] in report for {}",
                self.model
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<EvalReport> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
