//! Joint training of the representation model: a convex combination of
//! cross-entropy over labeled examples and triplet margin loss over human
//! judgments, optimized with Adam and manual backpropagation.
//!
//! One optimizer step consumes one classification batch and one triplet
//! batch; per epoch the longer stream is seen once and the shorter cycles
//! with reshuffling. The returned model is the checkpoint with the lowest
//! validation total loss.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureTable, Label, Split};
use crate::error::{Error, Result};
use crate::model::{softmax2, ReprModel, NUM_CLASSES};
use crate::triplets::TripletSet;

/// Probabilities are clamped here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Classification weight in the combined loss; 1 is pure classification,
    /// 0 pure metric learning.
    pub lambda: f64,
    pub margin: f64,
    pub lr: f64,
    pub triplet_batch: usize,
    pub class_batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.5,
            margin: 1.0,
            lr: 1e-4,
            triplet_batch: 40,
            class_batch: 30,
            epochs: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda must be in [0,1], got {}",
                self.lambda
            )));
        }
        if self.margin <= 0.0 || !self.margin.is_finite() {
            return Err(Error::Config("margin must be positive".into()));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.triplet_batch == 0 || self.class_batch == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Adam accumulators, one first/second moment pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<(Array2<f64>, Array1<f64>)>,
    v: Vec<(Array2<f64>, Array1<f64>)>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(model: &ReprModel) -> OptimizerState {
        let zeros = || {
            model
                .layers()
                .iter()
                .map(|l| (Array2::zeros(l.w.raw_dim()), Array1::zeros(l.b.raw_dim())))
                .collect::<Vec<_>>()
        };
        OptimizerState {
            m: zeros(),
            v: zeros(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Per-layer parameter gradients, shaped like the model.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl Gradients {
    fn zeros(model: &ReprModel) -> Gradients {
        Gradients {
            layers: model
                .layers()
                .iter()
                .map(|l| (Array2::zeros(l.w.raw_dim()), Array1::zeros(l.b.raw_dim())))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.iter().all(|v| v.is_finite()) && b.iter().all(|v| v.is_finite()))
    }
}

/// One bias-corrected adaptive-moment update.
pub fn adam_step(state: &mut OptimizerState, model: &mut ReprModel, grads: &Gradients, lr: f64) {
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    for (i, layer) in model.layers_mut().iter_mut().enumerate() {
        let (gw, gb) = &grads.layers[i];
        let (mw, mb) = &mut state.m[i];
        let (vw, vb) = &mut state.v[i];
        ndarray::Zip::from(&mut layer.w)
            .and(mw)
            .and(vw)
            .and(gw)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        ndarray::Zip::from(&mut layer.b)
            .and(mb)
            .and(vb)
            .and(gb)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
    }
}

/// Mean negative log-likelihood over a batch.
pub fn cross_entropy_loss(model: &ReprModel, x: ArrayView2<'_, f64>, ys: &[Label]) -> Result<f64> {
    if x.nrows() == 0 {
        return Err(Error::Config("cross-entropy over an empty batch".into()));
    }
    if x.nrows() != ys.len() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            got: ys.len(),
        });
    }
    let e = model.embed_batch(x)?;
    let logits = model.logits_from_embedding(e.view());
    let mut acc = 0.0;
    for (row, y) in logits.rows().into_iter().zip(ys) {
        let p = softmax2([row[0], row[1]]);
        acc -= p[y.index()].max(PROB_FLOOR).ln();
    }
    Ok(acc / ys.len() as f64)
}

/// Mean hinge `max(d(r,p) - d(r,n) + margin, 0)` over a batch of resolved
/// triplet feature rows.
pub fn triplet_margin_loss(
    model: &ReprModel,
    refs: ArrayView2<'_, f64>,
    poss: ArrayView2<'_, f64>,
    negs: ArrayView2<'_, f64>,
    margin: f64,
) -> Result<f64> {
    let b = refs.nrows();
    if b == 0 {
        return Err(Error::Config("triplet loss over an empty batch".into()));
    }
    if poss.nrows() != b || negs.nrows() != b {
        return Err(Error::DimensionMismatch {
            expected: b,
            got: poss.nrows().min(negs.nrows()),
        });
    }
    let er = model.embed_batch(refs)?;
    let ep = model.embed_batch(poss)?;
    let en = model.embed_batch(negs)?;
    let mut acc = 0.0;
    for i in 0..b {
        let dp = row_distance(&er, &ep, i);
        let dn = row_distance(&er, &en, i);
        acc += (dp - dn + margin).max(0.0);
    }
    Ok(acc / b as f64)
}

fn row_distance(a: &Array2<f64>, b: &Array2<f64>, i: usize) -> f64 {
    a.row(i)
        .iter()
        .zip(b.row(i).iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `lambda * ce + (1 - lambda) * tml`, with the unused term dropped at the
/// endpoints so an absent loss never contaminates the total.
pub fn total_loss(ce: f64, tml: f64, lambda: f64) -> f64 {
    if lambda == 1.0 {
        ce
    } else if lambda == 0.0 {
        tml
    } else {
        lambda * ce + (1.0 - lambda) * tml
    }
}

/// A classification batch resolved to feature rows.
pub struct ClassBatch<'a> {
    pub x: ArrayView2<'a, f64>,
    pub ys: &'a [Label],
}

/// A triplet batch resolved to feature rows.
pub struct TripletBatch<'a> {
    pub refs: ArrayView2<'a, f64>,
    pub poss: ArrayView2<'a, f64>,
    pub negs: ArrayView2<'a, f64>,
}

/// Exact gradients of the combined loss. Returns `(ce, tml, gradients)`;
/// a missing batch contributes nothing and reports NaN for its loss.
/// Inactive triplets (hinge at or below zero) contribute zero gradient.
pub fn backward(
    model: &ReprModel,
    class_batch: Option<ClassBatch<'_>>,
    triplet_batch: Option<TripletBatch<'_>>,
    lambda: f64,
    margin: f64,
) -> Result<(f64, f64, Gradients)> {
    let use_class = lambda > 0.0 && class_batch.is_some();
    let use_triplet = lambda < 1.0 && triplet_batch.is_some();
    if !use_class && !use_triplet {
        return Err(Error::Config(
            "backward needs at least one active loss term".into(),
        ));
    }

    let n_class = if use_class {
        class_batch.as_ref().unwrap().x.nrows()
    } else {
        0
    };
    let n_trip = if use_triplet {
        triplet_batch.as_ref().unwrap().refs.nrows()
    } else {
        0
    };
    if use_class && n_class == 0 {
        return Err(Error::Config("empty classification batch".into()));
    }
    if use_triplet && n_trip == 0 {
        return Err(Error::Config("empty triplet batch".into()));
    }

    let input_dim = model.input_dim();
    let mut x_all = Array2::zeros((n_class + 3 * n_trip, input_dim));
    if let (true, Some(cb)) = (use_class, class_batch.as_ref()) {
        x_all.slice_mut(ndarray::s![0..n_class, ..]).assign(&cb.x);
    }
    if let (true, Some(tb)) = (use_triplet, triplet_batch.as_ref()) {
        let base = n_class;
        x_all
            .slice_mut(ndarray::s![base..base + n_trip, ..])
            .assign(&tb.refs);
        x_all
            .slice_mut(ndarray::s![base + n_trip..base + 2 * n_trip, ..])
            .assign(&tb.poss);
        x_all
            .slice_mut(ndarray::s![base + 2 * n_trip..base + 3 * n_trip, ..])
            .assign(&tb.negs);
    }

    // Forward through encoder + projection, keeping layer outputs.
    let embed_layers = model.embed_layer_count();
    let mut acts: Vec<Array2<f64>> = Vec::with_capacity(embed_layers);
    {
        let mut cur = x_all.clone();
        for layer in &model.layers()[..embed_layers] {
            let mut out = cur.dot(&layer.w.t());
            out += &layer.b;
            out.mapv_inplace(|v| layer.activation.apply(v));
            acts.push(out.clone());
            cur = out;
        }
    }
    let embeddings = &acts[embed_layers - 1];
    let embed_dim = embeddings.ncols();

    let mut grads = Gradients::zeros(model);
    // Gradient with respect to the embedding rows of x_all.
    let mut d_embed = Array2::<f64>::zeros((n_class + 3 * n_trip, embed_dim));

    // Classification term.
    let mut ce = f64::NAN;
    if use_class {
        let cb = class_batch.as_ref().unwrap();
        let clf = &model.layers()[embed_layers];
        let e_class = embeddings.slice(ndarray::s![0..n_class, ..]);
        let logits = {
            let mut out = e_class.dot(&clf.w.t());
            out += &clf.b;
            out
        };
        let mut d_logits = Array2::<f64>::zeros((n_class, NUM_CLASSES));
        let mut acc = 0.0;
        let scale = lambda / n_class as f64;
        for (i, y) in cb.ys.iter().enumerate() {
            let p = softmax2([logits[[i, 0]], logits[[i, 1]]]);
            acc -= p[y.index()].max(PROB_FLOOR).ln();
            for k in 0..NUM_CLASSES {
                let target = if k == y.index() { 1.0 } else { 0.0 };
                d_logits[[i, k]] = (p[k] - target) * scale;
            }
        }
        ce = acc / n_class as f64;

        let (gw, gb) = &mut grads.layers[embed_layers];
        *gw = d_logits.t().dot(&e_class);
        *gb = d_logits.sum_axis(Axis(0));
        let d_e_class = d_logits.dot(&clf.w);
        d_embed
            .slice_mut(ndarray::s![0..n_class, ..])
            .assign(&d_e_class);
    }

    // Triplet margin term.
    let mut tml = f64::NAN;
    if use_triplet {
        let base = n_class;
        let scale = (1.0 - lambda) / n_trip as f64;
        let mut acc = 0.0;
        for i in 0..n_trip {
            let (ri, pi, ni) = (base + i, base + n_trip + i, base + 2 * n_trip + i);
            let mut dp = 0.0;
            let mut dn = 0.0;
            for j in 0..embed_dim {
                let vp = embeddings[[ri, j]] - embeddings[[pi, j]];
                let vn = embeddings[[ri, j]] - embeddings[[ni, j]];
                dp += vp * vp;
                dn += vn * vn;
            }
            let dp = dp.sqrt();
            let dn = dn.sqrt();
            let hinge = dp - dn + margin;
            if hinge > 0.0 {
                acc += hinge;
                // Subgradient 0 where a distance degenerates to zero.
                for j in 0..embed_dim {
                    let up = if dp > 0.0 {
                        (embeddings[[ri, j]] - embeddings[[pi, j]]) / dp
                    } else {
                        0.0
                    };
                    let un = if dn > 0.0 {
                        (embeddings[[ri, j]] - embeddings[[ni, j]]) / dn
                    } else {
                        0.0
                    };
                    d_embed[[ri, j]] += scale * (up - un);
                    d_embed[[pi, j]] -= scale * up;
                    d_embed[[ni, j]] += scale * un;
                }
            }
        }
        tml = acc / n_trip as f64;
    }

    // Backprop through projection and encoder.
    let mut d_act = d_embed;
    for k in (0..embed_layers).rev() {
        let layer = &model.layers()[k];
        let mut d_pre = d_act;
        ndarray::Zip::from(&mut d_pre)
            .and(&acts[k])
            .for_each(|g, &a| {
                *g *= layer.activation.derivative_from_output(a);
            });
        let below: ArrayView2<'_, f64> = if k == 0 {
            x_all.view()
        } else {
            acts[k - 1].view()
        };
        let (gw, gb) = &mut grads.layers[k];
        *gw = d_pre.t().dot(&below);
        *gb = d_pre.sum_axis(Axis(0));
        d_act = d_pre.dot(&layer.w);
    }

    #[cfg(debug_assertions)]
    {
        if !grads.all_finite() {
            return Err(Error::Diverged {
                epoch: 0,
                step: 0,
                msg: "non-finite gradient".into(),
            });
        }
    }

    Ok((ce, tml, grads))
}

/// Per-epoch loss record. Epoch 0 is the untrained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_ce: f64,
    pub train_tml: f64,
    pub train_total: f64,
    pub val_ce: f64,
    pub val_tml: f64,
    pub val_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_total_loss: f64,
}

impl TrainHistory {
    /// CSV with header `epoch,train_ce,train_tml,train_total,val_ce,val_tml,val_total`.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("epoch,train_ce,train_tml,train_total,val_ce,val_tml,val_total\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                e.epoch,
                fmt_loss(e.train_ce),
                fmt_loss(e.train_tml),
                fmt_loss(e.train_total),
                fmt_loss(e.val_ce),
                fmt_loss(e.val_tml),
                fmt_loss(e.val_total)
            ));
        }
        out
    }
}

fn fmt_loss(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.9e}")
    }
}

/// Shuffled index stream; reshuffles whenever exhausted.
struct BatchStream {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl BatchStream {
    fn new(len: usize, batch: usize) -> BatchStream {
        BatchStream {
            order: (0..len).collect(),
            pos: len, // force shuffle on first use
            batch,
        }
    }

    fn batches_per_epoch(&self) -> usize {
        self.order.len().div_ceil(self.batch)
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) {
        shuffle(&mut self.order, rng);
        self.pos = 0;
    }

    fn next_batch(&mut self, rng: &mut ChaCha8Rng) -> &[usize] {
        if self.pos >= self.order.len() {
            self.reset(rng);
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let out = &self.order[self.pos..end];
        self.pos = end;
        out
    }
}

fn shuffle(v: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

/// Triplet ids resolved to feature-table rows.
struct ResolvedTriplets {
    refs: Array2<f64>,
    poss: Array2<f64>,
    negs: Array2<f64>,
}

impl ResolvedTriplets {
    fn new(table: &FeatureTable, set: &TripletSet) -> Result<ResolvedTriplets> {
        let n = set.len();
        let dim = table.input_dim();
        let mut refs = Array2::zeros((n, dim));
        let mut poss = Array2::zeros((n, dim));
        let mut negs = Array2::zeros((n, dim));
        for (i, t) in set.triplets.iter().enumerate() {
            let (rs, rrow) = table.locate(t.ref_id).ok_or(Error::UnknownId(t.ref_id))?;
            if rs != t.ref_split {
                return Err(Error::Config(format!(
                    "triplet {i}: reference {} is not in split {}",
                    t.ref_id, t.ref_split
                )));
            }
            refs.row_mut(i).assign(&table.row(rs, rrow));
            poss.row_mut(i)
                .assign(&table.row(Split::Train, table.train_row(t.pos_id)?));
            negs.row_mut(i)
                .assign(&table.row(Split::Train, table.train_row(t.neg_id)?));
        }
        Ok(ResolvedTriplets { refs, poss, negs })
    }

    fn gather(&self, idx: &[usize]) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        (
            self.refs.select(Axis(0), idx),
            self.poss.select(Axis(0), idx),
            self.negs.select(Axis(0), idx),
        )
    }

    fn len(&self) -> usize {
        self.refs.nrows()
    }
}

/// Train a model, returning the parameters from the epoch with the lowest
/// validation total loss together with the loss history.
pub fn train(
    initial: &ReprModel,
    table: &FeatureTable,
    triplets: &TripletSet,
    val_triplets: &TripletSet,
    cfg: &TrainConfig,
) -> Result<(ReprModel, TrainHistory)> {
    train_with_val_every(initial, table, triplets, val_triplets, cfg, 1)
}

/// As [`train`], but validating (and checkpointing) only every `val_every`
/// epochs. Long runs with tiny triplet sets use this to keep the number of
/// validation passes comparable to a default-length run.
pub fn train_with_val_every(
    initial: &ReprModel,
    table: &FeatureTable,
    triplets: &TripletSet,
    val_triplets: &TripletSet,
    cfg: &TrainConfig,
    val_every: usize,
) -> Result<(ReprModel, TrainHistory)> {
    cfg.validate()?;
    if val_every == 0 {
        return Err(Error::Config("val_every must be at least 1".into()));
    }
    let n_train = table.x(Split::Train).nrows();
    if n_train == 0 {
        return Err(Error::DegenerateData("empty train split".into()));
    }
    if cfg.lambda < 1.0 && triplets.is_empty() {
        return Err(Error::Config(
            "training with lambda < 1 requires a nonempty triplet set".into(),
        ));
    }

    let use_class = cfg.lambda > 0.0;
    let use_triplet = cfg.lambda < 1.0 && !triplets.is_empty();
    let resolved = if triplets.is_empty() {
        None
    } else {
        Some(ResolvedTriplets::new(table, triplets)?)
    };
    let resolved_val = if val_triplets.is_empty() {
        None
    } else {
        Some(ResolvedTriplets::new(table, val_triplets)?)
    };

    let mut model = initial.clone();
    let mut opt = OptimizerState::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut class_stream = BatchStream::new(n_train, cfg.class_batch);
    let mut triplet_stream = resolved
        .as_ref()
        .map(|r| BatchStream::new(r.len(), cfg.triplet_batch));

    // Steps per epoch: the longer active stream is consumed exactly once.
    // A triplet stream supplied at lambda = 1 still sets the pace (step-count
    // parity across model kinds) but its contents are never evaluated.
    let class_batches = if use_class {
        class_stream.batches_per_epoch()
    } else {
        0
    };
    let triplet_batches = triplet_stream.as_ref().map_or(0, |s| s.batches_per_epoch());
    let steps_per_epoch = class_batches.max(triplet_batches);
    if steps_per_epoch == 0 {
        return Err(Error::Config(
            "no active loss stream (lambda = 0 with no triplets?)".into(),
        ));
    }

    let evaluate = |model: &ReprModel, epoch: usize| -> Result<EpochStats> {
        let train_ce = if use_class {
            cross_entropy_loss(model, table.x(Split::Train), table.labels(Split::Train))?
        } else {
            f64::NAN
        };
        let train_tml = match (&resolved, use_triplet) {
            (Some(r), true) => triplet_margin_loss(
                model,
                r.refs.view(),
                r.poss.view(),
                r.negs.view(),
                cfg.margin,
            )?,
            _ => f64::NAN,
        };
        let val_x = table.x(Split::Val);
        let val_ce = if use_class && val_x.nrows() > 0 {
            cross_entropy_loss(model, val_x, table.labels(Split::Val))?
        } else {
            f64::NAN
        };
        let val_tml = match (&resolved_val, use_triplet) {
            (Some(r), true) => triplet_margin_loss(
                model,
                r.refs.view(),
                r.poss.view(),
                r.negs.view(),
                cfg.margin,
            )?,
            _ => f64::NAN,
        };
        Ok(EpochStats {
            epoch,
            train_ce,
            train_tml,
            train_total: total_loss(train_ce, train_tml, cfg.lambda),
            val_ce,
            val_tml,
            val_total: total_loss(val_ce, val_tml, cfg.lambda),
        })
    };

    let initial_stats = evaluate(&model, 0)?;
    if !initial_stats.val_total.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            step: 0,
            msg: "validation loss not finite before training".into(),
        });
    }
    let mut best_epoch = 0usize;
    let mut best_val = initial_stats.val_total;
    let mut best_model = model.clone();
    let mut history = vec![initial_stats];

    let train_x = table.x(Split::Train);
    let train_y = table.labels(Split::Train);

    for epoch in 1..=cfg.epochs {
        class_stream.reset(&mut rng);
        if let Some(s) = triplet_stream.as_mut() {
            s.reset(&mut rng);
        }
        let mut sum_ce = 0.0;
        let mut sum_tml = 0.0;
        let mut n_ce = 0usize;
        let mut n_tml = 0usize;

        for step in 0..steps_per_epoch {
            let class_idx: Option<Vec<usize>> = if use_class {
                Some(class_stream.next_batch(&mut rng).to_vec())
            } else {
                None
            };
            // Keep the shorter stream cycling even when its loss is off, so
            // the RNG stream and step pacing stay comparable across lambdas.
            let triplet_idx: Option<Vec<usize>> = triplet_stream
                .as_mut()
                .map(|s| s.next_batch(&mut rng).to_vec());

            let class_data = class_idx.as_ref().map(|idx| {
                let x = train_x.select(Axis(0), idx);
                let ys: Vec<Label> = idx.iter().map(|&i| train_y[i]).collect();
                (x, ys)
            });
            let triplet_data = match (use_triplet, &resolved, &triplet_idx) {
                (true, Some(r), Some(idx)) => Some(r.gather(idx)),
                _ => None,
            };

            let (ce, tml, grads) = backward(
                &model,
                class_data
                    .as_ref()
                    .map(|(x, ys)| ClassBatch { x: x.view(), ys }),
                triplet_data.as_ref().map(|(r, p, n)| TripletBatch {
                    refs: r.view(),
                    poss: p.view(),
                    negs: n.view(),
                }),
                cfg.lambda,
                cfg.margin,
            )?;

            if use_class {
                if !ce.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        msg: format!("cross-entropy loss became {ce}"),
                    });
                }
                sum_ce += ce;
                n_ce += 1;
            }
            if use_triplet {
                if !tml.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        msg: format!("triplet loss became {tml}"),
                    });
                }
                sum_tml += tml;
                n_tml += 1;
            }
            adam_step(&mut opt, &mut model, &grads, cfg.lr);
        }

        if !model.all_finite() {
            return Err(Error::Diverged {
                epoch,
                step: steps_per_epoch,
                msg: "parameters became non-finite".into(),
            });
        }

        if epoch % val_every != 0 && epoch != cfg.epochs {
            continue;
        }
        let val_stats = evaluate(&model, epoch)?;
        let stats = EpochStats {
            epoch,
            train_ce: if n_ce > 0 {
                sum_ce / n_ce as f64
            } else {
                f64::NAN
            },
            train_tml: if n_tml > 0 {
                sum_tml / n_tml as f64
            } else {
                f64::NAN
            },
            train_total: total_loss(
                if n_ce > 0 {
                    sum_ce / n_ce as f64
                } else {
                    f64::NAN
                },
                if n_tml > 0 {
                    sum_tml / n_tml as f64
                } else {
                    f64::NAN
                },
                cfg.lambda,
            ),
            val_ce: val_stats.val_ce,
            val_tml: val_stats.val_tml,
            val_total: val_stats.val_total,
        };
        if !stats.val_total.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step: steps_per_epoch,
                msg: "validation loss became non-finite".into(),
            });
        }
        if stats.val_total < best_val {
            best_val = stats.val_total;
            best_epoch = epoch;
            best_model = model.clone();
        }
        history.push(stats);
    }

    Ok((
        best_model,
        TrainHistory {
            epochs: history,
            best_epoch,
            best_val_total_loss: best_val,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{
        generate_dataset_with, DecisionBoundary, FeatureTable, InsectExample, SampleOptions,
        SplitDataset,
    };
    use crate::model::{init_model, Activation, ModelConfig};
    use crate::oracle::SimilarityOracle;
    use crate::triplets::{sample_and_label, Triplet, TripletVariant};
    use ndarray::array;
    use rand::Rng;

    fn small_cfg(seed: u64) -> ModelConfig {
        ModelConfig {
            input_dim: 4,
            hidden_dims: vec![16],
            embed_dim: 8,
            activation: Activation::Tanh,
            projection_activation: Activation::Tanh,
            init_seed: seed,
        }
    }

    fn dataset(n: usize, seed: u64) -> SplitDataset {
        generate_dataset_with(
            n,
            DecisionBoundary::Square { lo: 0.35, hi: 0.65 },
            (0.6, 0.2, 0.2),
            seed,
            SampleOptions {
                balance: true,
                margin: 0.08,
            },
        )
        .unwrap()
    }

    /// Model whose embedding is the identity on [0,1]^4: relu layers with
    /// identity weights and zero bias.
    fn identity_model() -> ReprModel {
        let mut m = init_model(&ModelConfig {
            input_dim: 4,
            hidden_dims: vec![4],
            embed_dim: 4,
            activation: Activation::Relu,
            projection_activation: Activation::Relu,
            init_seed: 0,
        })
        .unwrap();
        for layer in m.layers_mut().iter_mut().take(2) {
            layer.w.fill(0.0);
            for i in 0..4 {
                layer.w[[i, i]] = 1.0;
            }
            layer.b.fill(0.0);
        }
        m
    }

    fn ex(id: u32, f: [f64; 4]) -> InsectExample {
        InsectExample {
            id,
            head: f[0],
            body: f[1],
            tail: f[2],
            texture: f[3],
            label: Label::Vespula,
        }
    }

    #[test]
    fn cross_entropy_uniform_model_is_ln2() {
        let mut m = init_model(&small_cfg(0)).unwrap();
        let last = m.layers().len() - 1;
        m.layers_mut()[last].w.fill(0.0);
        m.layers_mut()[last].b.fill(0.0);
        let x = array![[0.1, 0.2, 0.3, 0.4], [0.9, 0.8, 0.7, 0.6]];
        let ce = cross_entropy_loss(&m, x.view(), &[Label::Vespula, Label::Weevil]).unwrap();
        assert!((ce - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_correct_model_is_tiny() {
        let mut m = identity_model();
        // Classifier with an overwhelming bias toward class 0.
        let last = m.layers().len() - 1;
        m.layers_mut()[last].w.fill(0.0);
        m.layers_mut()[last].b[0] = 100.0;
        let x = array![[0.0, 0.5, 0.5, 0.5]];
        let ce = cross_entropy_loss(&m, x.view(), &[Label::Vespula]).unwrap();
        assert!((0.0..1e-10).contains(&ce), "ce = {ce}");
    }

    #[test]
    fn triplet_loss_matches_hand_arithmetic() {
        let m = identity_model();
        // d(r,p) = 0.2, d(r,n) = 1.5 -> hinge max(0.2 - 1.5 + 1, 0) = 0.
        let refs = array![[0.0, 0.0, 0.0, 0.0]];
        let poss = array![[0.2, 0.0, 0.0, 0.0]];
        let negs = array![[1.0, 1.0, 0.5, 0.0]];
        let loss = triplet_margin_loss(&m, refs.view(), poss.view(), negs.view(), 1.0).unwrap();
        assert!((loss - 0.0).abs() < 1e-12);

        // d(r,p) = 1.0, d(r,n) = 1.2 -> 0.8.
        let poss = array![[1.0, 0.0, 0.0, 0.0]];
        let negs = array![[0.6, 0.6, 0.6, 0.6]];
        let loss = triplet_margin_loss(&m, refs.view(), poss.view(), negs.view(), 1.0).unwrap();
        assert!((loss - 0.8).abs() < 1e-12);

        // pos == neg instance -> loss = margin.
        let loss = triplet_margin_loss(&m, refs.view(), negs.view(), negs.view(), 1.0).unwrap();
        assert!((loss - 1.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_endpoints() {
        assert_eq!(total_loss(0.3, 7.0, 1.0), 0.3);
        assert_eq!(total_loss(0.3, 7.0, 0.0), 7.0);
        assert!((total_loss(0.4, 0.6, 0.5) - 0.5).abs() < 1e-15);
        // Endpoint drops an absent (NaN) term entirely.
        assert_eq!(total_loss(0.3, f64::NAN, 1.0), 0.3);
        assert_eq!(total_loss(f64::NAN, 0.6, 0.0), 0.6);
    }

    /// Central finite differences against the analytic gradient on a model
    /// with both active and inactive triplets in the batch.
    fn check_gradients(activation: Activation, lambda: f64) {
        let cfg = ModelConfig {
            input_dim: 4,
            hidden_dims: vec![16],
            embed_dim: 8,
            activation,
            projection_activation: activation,
            init_seed: 42,
        };
        let mut model = init_model(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);

        let class_x = array![
            [0.1, 0.9, 0.3, 0.7],
            [0.5, 0.5, 0.5, 0.5],
            [0.8, 0.2, 0.6, 0.4],
        ];
        let class_y = vec![Label::Vespula, Label::Weevil, Label::Vespula];
        // Mix of active and inactive hinges: tight positives make the hinge
        // inactive, far positives activate it.
        let refs = array![
            [0.5, 0.5, 0.5, 0.5],
            [0.1, 0.1, 0.1, 0.1],
            [0.9, 0.9, 0.9, 0.9],
            [0.3, 0.7, 0.4, 0.6],
        ];
        let poss = array![
            [0.51, 0.5, 0.5, 0.5],
            [0.9, 0.9, 0.9, 0.9],
            [0.1, 0.1, 0.2, 0.1],
            [0.31, 0.7, 0.4, 0.6],
        ];
        let negs = array![
            [0.9, 0.1, 0.9, 0.1],
            [0.12, 0.1, 0.1, 0.1],
            [0.88, 0.9, 0.9, 0.9],
            [0.9, 0.2, 0.8, 0.3],
        ];

        let margin = 1.0;
        let loss_at = |m: &ReprModel| -> f64 {
            let ce = if lambda > 0.0 {
                cross_entropy_loss(m, class_x.view(), &class_y).unwrap()
            } else {
                f64::NAN
            };
            let tml = if lambda < 1.0 {
                triplet_margin_loss(m, refs.view(), poss.view(), negs.view(), margin).unwrap()
            } else {
                f64::NAN
            };
            total_loss(ce, tml, lambda)
        };

        let (_, _, grads) = backward(
            &model,
            (lambda > 0.0).then(|| ClassBatch {
                x: class_x.view(),
                ys: &class_y,
            }),
            (lambda < 1.0).then(|| TripletBatch {
                refs: refs.view(),
                poss: poss.view(),
                negs: negs.view(),
            }),
            lambda,
            margin,
        )
        .unwrap();

        let flat_grads: Vec<f64> = grads
            .layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied().collect::<Vec<_>>())
            .collect();
        let params = model.flat_params();
        let h = 1e-5;
        for _ in 0..50 {
            let i = rng.random_range(0..params.len());
            let mut plus = params.clone();
            plus[i] += h;
            model.set_flat_params(&plus).unwrap();
            let lp = loss_at(&model);
            let mut minus = params.clone();
            minus[i] -= h;
            model.set_flat_params(&minus).unwrap();
            let lm = loss_at(&model);
            model.set_flat_params(&params).unwrap();

            let fd = (lp - lm) / (2.0 * h);
            let g = flat_grads[i];
            let denom = fd.abs().max(g.abs()).max(1e-8);
            let rel = (fd - g).abs() / denom;
            assert!(
                rel <= 1e-4,
                "coordinate {i}: analytic {g} vs finite-difference {fd} (rel {rel})"
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences_tanh() {
        check_gradients(Activation::Tanh, 0.5);
    }

    #[test]
    fn gradients_match_finite_differences_relu() {
        check_gradients(Activation::Relu, 0.5);
    }

    #[test]
    fn gradients_match_finite_differences_pure_terms() {
        check_gradients(Activation::Tanh, 1.0);
        check_gradients(Activation::Tanh, 0.0);
    }

    #[test]
    fn inactive_triplet_batch_has_zero_gradient() {
        let m = identity_model();
        // Positive at distance 0.01, negative at ~1.7: hinge far below zero.
        let refs = array![[0.0, 0.0, 0.0, 0.0]];
        let poss = array![[0.01, 0.0, 0.0, 0.0]];
        let negs = array![[1.0, 1.0, 1.0, 0.0]];
        let (_, tml, grads) = backward(
            &m,
            None,
            Some(TripletBatch {
                refs: refs.view(),
                poss: poss.view(),
                negs: negs.view(),
            }),
            0.0,
            1.0,
        )
        .unwrap();
        assert_eq!(tml, 0.0);
        for (w, b) in &grads.layers {
            assert!(w.iter().all(|v| *v == 0.0));
            assert!(b.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn lambda_one_gradient_ignores_triplets() {
        let model = init_model(&small_cfg(3)).unwrap();
        let class_x = array![[0.1, 0.2, 0.3, 0.4], [0.6, 0.5, 0.4, 0.3]];
        let ys = vec![Label::Weevil, Label::Vespula];
        let t1 = (
            array![[0.1, 0.1, 0.1, 0.1]],
            array![[0.9, 0.9, 0.9, 0.9]],
            array![[0.2, 0.2, 0.2, 0.2]],
        );
        let t2 = (
            array![[0.7, 0.1, 0.5, 0.1]],
            array![[0.2, 0.9, 0.1, 0.9]],
            array![[0.6, 0.2, 0.5, 0.2]],
        );
        let run = |t: &(Array2<f64>, Array2<f64>, Array2<f64>)| {
            let (_, _, g) = backward(
                &model,
                Some(ClassBatch {
                    x: class_x.view(),
                    ys: &ys,
                }),
                Some(TripletBatch {
                    refs: t.0.view(),
                    poss: t.1.view(),
                    negs: t.2.view(),
                }),
                1.0,
                1.0,
            )
            .unwrap();
            g
        };
        let g1 = run(&t1);
        let g2 = run(&t2);
        for ((w1, b1), (w2, b2)) in g1.layers.iter().zip(g2.layers.iter()) {
            assert_eq!(w1, w2);
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters() {
        let mut m = init_model(&small_cfg(4)).unwrap();
        let before = m.flat_params();
        let mut opt = OptimizerState::new(&m);
        let grads = Gradients::zeros(&m);
        adam_step(&mut opt, &mut m, &grads, 1e-2);
        assert_eq!(before, m.flat_params());
    }

    #[test]
    fn adam_first_step_is_signed_unit_step() {
        let mut m = init_model(&small_cfg(5)).unwrap();
        let before = m.flat_params();
        let mut opt = OptimizerState::new(&m);
        let mut grads = Gradients::zeros(&m);
        grads.layers[0].0[[0, 0]] = 0.3;
        grads.layers[0].0[[0, 1]] = -2.0;
        let lr = 1e-3;
        adam_step(&mut opt, &mut m, &grads, lr);
        let after = m.flat_params();
        // After bias correction the first update is lr * g / (|g| + eps).
        let d00 = after[0] - before[0];
        let d01 = after[1] - before[1];
        assert!((d00 + lr * 0.3 / (0.3 + 1e-8)).abs() < 1e-12);
        assert!((d01 - lr * 2.0 / (2.0 + 1e-8)).abs() < 1e-12);
        assert_eq!(after[2], before[2]);
    }

    fn quick_train(
        lambda: f64,
        epochs: usize,
        data: &SplitDataset,
        seed: u64,
    ) -> (ReprModel, TrainHistory) {
        let table = FeatureTable::new(data, None);
        let o = SimilarityOracle::new([1.0, 1.0, 1.0, 1.0]).unwrap();
        let trips = sample_and_label(data, 2000, Split::Train, &o, 50).unwrap();
        let val_trips = sample_and_label(data, 400, Split::Val, &o, 51).unwrap();
        let model = init_model(&ModelConfig {
            init_seed: seed,
            ..ModelConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            lambda,
            epochs,
            seed,
            ..TrainConfig::default()
        };
        train(&model, &table, &trips, &val_trips, &cfg).unwrap()
    }

    #[test]
    fn training_is_deterministic() {
        let data = dataset(300, 8);
        let (m1, h1) = quick_train(0.5, 3, &data, 9);
        let (m2, h2) = quick_train(0.5, 3, &data, 9);
        assert_eq!(m1, m2);
        assert_eq!(h1, h2);
    }

    #[test]
    fn loss_decreases_on_separable_data() {
        let data = dataset(400, 10);
        let (_, hist) = quick_train(0.5, 8, &data, 11);
        let first = &hist.epochs[0];
        let last = &hist.epochs[hist.epochs.len() - 1];
        assert!(last.val_total < first.val_total);
        assert!(hist.best_val_total_loss <= first.val_total);
        assert_eq!(
            hist.best_val_total_loss,
            hist.epochs
                .iter()
                .map(|e| e.val_total)
                .fold(f64::INFINITY, f64::min)
        );
    }

    #[test]
    fn lambda_zero_leaves_classifier_untrained() {
        let data = dataset(300, 12);
        let table = FeatureTable::new(&data, None);
        let o = SimilarityOracle::new([1.0; 4]).unwrap();
        let trips = sample_and_label(&data, 1000, Split::Train, &o, 60).unwrap();
        let val_trips = sample_and_label(&data, 200, Split::Val, &o, 61).unwrap();
        let model = init_model(&ModelConfig::default()).unwrap();
        let cfg = TrainConfig {
            lambda: 0.0,
            epochs: 2,
            seed: 13,
            ..TrainConfig::default()
        };
        let (trained, _) = train(&model, &table, &trips, &val_trips, &cfg).unwrap();
        let k = trained.embed_layer_count();
        assert_eq!(trained.layers()[k], model.layers()[k]);
        assert_ne!(trained.layers()[0], model.layers()[0]);
    }

    #[test]
    fn lambda_one_model_ignores_triplet_contents() {
        let data = dataset(300, 14);
        let table = FeatureTable::new(&data, None);
        let o1 = SimilarityOracle::new([1.0, 1.0, 1.0, 1.0]).unwrap();
        let o2 = SimilarityOracle::new([0.0, 0.0, 1.0, 1.0]).unwrap();
        let t1 = sample_and_label(&data, 1000, Split::Train, &o1, 70).unwrap();
        let t2 = sample_and_label(&data, 1000, Split::Train, &o2, 71).unwrap();
        let val = sample_and_label(&data, 100, Split::Val, &o1, 72).unwrap();
        let model = init_model(&ModelConfig::default()).unwrap();
        let cfg = TrainConfig {
            lambda: 1.0,
            epochs: 2,
            seed: 15,
            ..TrainConfig::default()
        };
        let (m1, _) = train(&model, &table, &t1, &val, &cfg).unwrap();
        let (m2, _) = train(&model, &table, &t2, &val, &cfg).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn divergence_is_detected_and_reported() {
        let data = dataset(200, 16);
        let table = FeatureTable::new(&data, None);
        let o = SimilarityOracle::new([1.0; 4]).unwrap();
        let trips = sample_and_label(&data, 200, Split::Train, &o, 80).unwrap();
        let val = sample_and_label(&data, 50, Split::Val, &o, 81).unwrap();
        let model = init_model(&ModelConfig {
            activation: Activation::Relu,
            ..ModelConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            lambda: 0.5,
            epochs: 3,
            lr: 1e150,
            seed: 17,
            ..TrainConfig::default()
        };
        match train(&model, &table, &trips, &val, &cfg) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn empty_triplets_with_lambda_below_one_is_an_error() {
        let data = dataset(200, 18);
        let table = FeatureTable::new(&data, None);
        let empty = TripletSet {
            triplets: vec![],
            variant: TripletVariant::Human,
            oracle_weights: None,
            split_tag: Split::Train,
            seed: 0,
        };
        let model = init_model(&ModelConfig::default()).unwrap();
        let cfg = TrainConfig {
            lambda: 0.5,
            epochs: 1,
            seed: 1,
            ..TrainConfig::default()
        };
        assert!(train(&model, &table, &empty, &empty, &cfg).is_err());
    }

    #[test]
    fn history_csv_has_expected_header_and_rows() {
        let data = dataset(200, 20);
        let (_, hist) = quick_train(1.0, 2, &data, 21);
        let csv = hist.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,train_ce,train_tml,train_total,val_ce,val_tml,val_total"
        );
        assert_eq!(csv.lines().count(), 1 + 3); // epoch 0 plus two trained epochs
                                                // lambda = 1: the tml columns are absent markers.
        let row1 = csv.lines().nth(2).unwrap();
        assert!(row1.split(',').nth(2).unwrap() == "nan");
    }

    #[test]
    fn triplet_resolution_rejects_foreign_ids() {
        let data = dataset(100, 22);
        let table = FeatureTable::new(&data, None);
        let bad = TripletSet {
            triplets: vec![Triplet {
                ref_split: Split::Train,
                ref_id: 9999,
                pos_id: data.train[0].id,
                neg_id: data.train[1].id,
                tie: false,
            }],
            variant: TripletVariant::Human,
            oracle_weights: None,
            split_tag: Split::Train,
            seed: 0,
        };
        assert!(ResolvedTriplets::new(&table, &bad).is_err());
        let _ = ex(0, [0.0; 4]); // keep helper linked into this test module
    }
}
