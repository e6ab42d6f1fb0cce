//! The representation model: a small feed-forward network with an encoder,
//! a projection head that produces the embedding, and a linear classifier
//! head over the embedding. All parameters are explicit so training can
//! differentiate by hand.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    /// Identity; used by the classifier output layer.
    Linear,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
            Activation::Linear => v,
        }
    }

    /// Derivative expressed through the activation output.
    pub fn derivative_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Relu => {
                if out > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

/// One dense layer, weights stored `(out, in)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = x.dot(&self.w.t());
        out += &self.b;
        if self.activation != Activation::Linear {
            out.mapv_inplace(|v| self.activation.apply(v));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    /// Encoder hidden-layer activation.
    pub activation: Activation,
    /// Projection-head activation. Relu leaves the embedding scale free, so
    /// the unit hinge margin does not squash the learned metric.
    #[serde(default = "default_projection_activation")]
    pub projection_activation: Activation,
    pub init_seed: u64,
}

fn default_projection_activation() -> Activation {
    Activation::Relu
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::Config(
                "hidden_dims must be nonempty with positive widths".into(),
            ));
        }
        if self.activation == Activation::Linear || self.projection_activation == Activation::Linear
        {
            return Err(Error::Config(
                "encoder and projection activations must be tanh or relu".into(),
            ));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 4,
            hidden_dims: vec![64, 64],
            embed_dim: 50,
            activation: Activation::Tanh,
            projection_activation: Activation::Relu,
            init_seed: 0,
        }
    }
}

/// Encoder + projection head + classifier head.
///
/// `layers[..embed_layers]` maps inputs to the embedding; the final layer is
/// the linear classifier over the embedding. Inference never mutates.
#[derive(Debug, Clone, PartialEq)]
pub struct ReprModel {
    layers: Vec<DenseLayer>,
    embed_layers: usize,
    config: ModelConfig,
}

/// Glorot-initialized model; identical seeds give identical parameters.
pub fn init_model(config: &ModelConfig) -> Result<ReprModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let mut dims = vec![config.input_dim];
    dims.extend_from_slice(&config.hidden_dims);
    dims.push(config.embed_dim);
    dims.push(NUM_CLASSES);

    let mut layers = Vec::with_capacity(dims.len() - 1);
    for k in 0..dims.len() - 1 {
        let (fan_in, fan_out) = (dims[k], dims[k + 1]);
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let w = Array2::from_shape_fn((fan_out, fan_in), |_| normal.sample(&mut rng));
        let is_classifier = k == dims.len() - 2;
        let is_projection = k == dims.len() - 3;
        layers.push(DenseLayer {
            w,
            b: Array1::zeros(fan_out),
            activation: if is_classifier {
                Activation::Linear
            } else if is_projection {
                config.projection_activation
            } else {
                config.activation
            },
        });
    }
    Ok(ReprModel {
        embed_layers: layers.len() - 1,
        layers,
        config: config.clone(),
    })
}

impl ReprModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    /// Number of layers (encoder + projection) feeding the embedding.
    pub fn embed_layer_count(&self) -> usize {
        self.embed_layers
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.config.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.input_dim,
                got: cols,
            });
        }
        Ok(())
    }

    /// Embeddings for a batch of row vectors.
    pub fn embed_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        let mut cur = x.to_owned();
        for layer in &self.layers[..self.embed_layers] {
            cur = layer.forward(cur.view());
        }
        Ok(cur)
    }

    pub fn embed(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let batch = x.insert_axis(Axis(0));
        Ok(self.embed_batch(batch)?.remove_axis(Axis(0)))
    }

    pub fn logits_from_embedding(&self, e: ArrayView2<'_, f64>) -> Array2<f64> {
        self.layers[self.embed_layers].forward(e)
    }

    /// Class probabilities via a max-shifted softmax.
    pub fn classify(&self, x: ArrayView1<'_, f64>) -> Result<[f64; NUM_CLASSES]> {
        let e = self.embed(x)?;
        let logits = self
            .logits_from_embedding(e.view().insert_axis(Axis(0)))
            .remove_axis(Axis(0));
        Ok(softmax2([logits[0], logits[1]]))
    }

    /// Argmax prediction; ties resolve to class 0.
    pub fn predict(&self, x: ArrayView1<'_, f64>) -> Result<Label> {
        let p = self.classify(x)?;
        Ok(if p[1] > p[0] {
            Label::Weevil
        } else {
            Label::Vespula
        })
    }

    /// Euclidean distance between two embeddings.
    pub fn model_distance(&self, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<f64> {
        let ea = self.embed(a)?;
        let eb = self.embed(b)?;
        Ok(ea
            .iter()
            .zip(eb.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Flat parameter vector: per layer, row-major weights then bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                got: params.len(),
            });
        }
        let mut it = params.iter();
        for l in &mut self.layers {
            for v in l.w.iter_mut() {
                *v = *it.next().unwrap();
            }
            for v in l.b.iter_mut() {
                *v = *it.next().unwrap();
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().all(|v| v.is_finite()) && l.b.iter().all(|v| v.is_finite()))
    }

    /// Write a versioned JSON checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| CheckpointLayer {
                    rows: l.w.nrows(),
                    cols: l.w.ncols(),
                    weights: l.w.iter().copied().collect(),
                    bias: l.b.to_vec(),
                    activation: l.activation,
                })
                .collect(),
        };
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, &ckpt)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ReprModel> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let ckpt: Checkpoint = serde_json::from_reader(file)?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint version {} (expected {})",
                ckpt.format_version, CHECKPOINT_VERSION
            )));
        }
        ckpt.config.validate()?;
        let mut layers = Vec::with_capacity(ckpt.layers.len());
        for l in ckpt.layers {
            if l.weights.len() != l.rows * l.cols || l.bias.len() != l.rows {
                return Err(Error::Config("checkpoint layer shape mismatch".into()));
            }
            layers.push(DenseLayer {
                w: Array2::from_shape_vec((l.rows, l.cols), l.weights)
                    .map_err(|e| Error::Config(e.to_string()))?,
                b: Array1::from_vec(l.bias),
                activation: l.activation,
            });
        }
        let model = ReprModel {
            embed_layers: layers.len().saturating_sub(1),
            layers,
            config: ckpt.config,
        };
        if !chain_ok(&model) {
            return Err(Error::Config(
                "checkpoint layer dimensions do not chain".into(),
            ));
        }
        Ok(model)
    }
}

fn chain_ok(m: &ReprModel) -> bool {
    let mut prev = m.config.input_dim;
    for l in &m.layers {
        if l.w.ncols() != prev {
            return false;
        }
        prev = l.w.nrows();
    }
    prev == NUM_CLASSES
        && m.layers[m.embed_layers.saturating_sub(1)].w.nrows() == m.config.embed_dim
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    config: ModelConfig,
    layers: Vec<CheckpointLayer>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointLayer {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
}

pub fn softmax2(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let z = e0 + e1;
    [e0 / z, e1 / z]
}
