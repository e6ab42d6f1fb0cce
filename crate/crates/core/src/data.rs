//! Synthetic "Vespula vs Weevil" dataset generation.
//!
//! Every example carries four visual features in `[0, 1]`: head size, body
//! size, tail length and texture. Only head and body are predictive; the
//! label is a deterministic function of them given a [`DecisionBoundary`].
//! Generation is fully reproducible from `(n, boundary, ratios, seed)`.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_FEATURES: usize = 4;

/// Binary class label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Vespula = 0,
    Weevil = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn other(self) -> Label {
        match self {
            Label::Vespula => Label::Weevil,
            Label::Weevil => Label::Vespula,
        }
    }

    pub fn from_index(i: usize) -> Option<Label> {
        match i {
            0 => Some(Label::Vespula),
            1 => Some(Label::Weevil),
            _ => None,
        }
    }

    pub const ALL: [Label; 2] = [Label::Vespula, Label::Weevil];
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

/// One synthetic instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InsectExample {
    pub id: u32,
    pub head: f64,
    pub body: f64,
    pub tail: f64,
    pub texture: f64,
    pub label: Label,
}

impl InsectExample {
    pub fn features(&self) -> [f64; NUM_FEATURES] {
        [self.head, self.body, self.tail, self.texture]
    }
}

/// Groundtruth labeling rule over the two informative features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum DecisionBoundary {
    /// Weevil iff both head and body fall in `[lo, hi]`.
    Square { lo: f64, hi: f64 },
    /// Weevil iff `w_head * head + w_body * body >= offset`.
    Linear {
        w_head: f64,
        w_body: f64,
        offset: f64,
    },
}

impl DecisionBoundary {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DecisionBoundary::Square { lo, hi } => {
                if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
                    return Err(Error::Config(format!(
                        "square boundary requires 0 <= lo < hi <= 1, got lo={lo}, hi={hi}"
                    )));
                }
            }
            DecisionBoundary::Linear { w_head, w_body, .. } => {
                if w_head == 0.0 && w_body == 0.0 {
                    return Err(Error::Config(
                        "linear boundary requires (w_head, w_body) != (0, 0)".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Signed distance from `(head, body)` to the label boundary, positive on
    /// the Weevil side. For the square this is the Euclidean distance to the
    /// box surface; for the linear rule the normalized margin.
    pub fn signed_distance(&self, head: f64, body: f64) -> f64 {
        match *self {
            DecisionBoundary::Square { lo, hi } => {
                let inside = head >= lo && head <= hi && body >= lo && body <= hi;
                if inside {
                    (head - lo).min(hi - head).min(body - lo).min(hi - body)
                } else {
                    let dx = (lo - head).max(head - hi).max(0.0);
                    let dy = (lo - body).max(body - hi).max(0.0);
                    -dx.hypot(dy)
                }
            }
            DecisionBoundary::Linear {
                w_head,
                w_body,
                offset,
            } => (w_head * head + w_body * body - offset) / w_head.hypot(w_body),
        }
    }
}

/// Which split an example belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A labeled dataset partitioned into train/val/test.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Vec<InsectExample>,
    pub val: Vec<InsectExample>,
    pub test: Vec<InsectExample>,
    pub boundary: DecisionBoundary,
    pub seed: u64,
}

impl SplitDataset {
    pub fn split(&self, s: Split) -> &[InsectExample] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter_all(&self) -> impl Iterator<Item = (Split, &InsectExample)> {
        Split::ALL
            .iter()
            .flat_map(move |&s| self.split(s).iter().map(move |e| (s, e)))
    }

    /// Look up a train-split example by id.
    pub fn train_by_id(&self, id: u32) -> Option<&InsectExample> {
        self.train.iter().find(|e| e.id == id)
    }

    pub fn class_counts(&self, s: Split) -> [usize; 2] {
        let mut counts = [0usize; 2];
        for e in self.split(s) {
            counts[e.label.index()] += 1;
        }
        counts
    }
}

/// Label a point under a boundary.
pub fn assign_label(head: f64, body: f64, boundary: &DecisionBoundary) -> Label {
    match *boundary {
        DecisionBoundary::Square { lo, hi } => {
            if head >= lo && head <= hi && body >= lo && body <= hi {
                Label::Weevil
            } else {
                Label::Vespula
            }
        }
        DecisionBoundary::Linear {
            w_head,
            w_body,
            offset,
        } => {
            if w_head * head + w_body * body >= offset {
                Label::Weevil
            } else {
                Label::Vespula
            }
        }
    }
}

/// Sampling options beyond the plain uniform scheme.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SampleOptions {
    /// Rejection-sample to an even class split.
    pub balance: bool,
    /// Reject points closer than this to the label boundary.
    pub margin: f64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            balance: false,
            margin: 0.0,
        }
    }
}

/// Uniform i.i.d. features on `[0,1]^4`, labeled by `boundary`, shuffled into
/// splits. Identical arguments give identical output.
pub fn generate_dataset(
    n: usize,
    boundary: DecisionBoundary,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitDataset> {
    generate_dataset_with(n, boundary, ratios, seed, SampleOptions::default())
}

/// As [`generate_dataset`], with balancing and boundary-margin rejection.
pub fn generate_dataset_with(
    n: usize,
    boundary: DecisionBoundary,
    ratios: (f64, f64, f64),
    seed: u64,
    opts: SampleOptions,
) -> Result<SplitDataset> {
    if n == 0 {
        return Err(Error::Config("dataset size must be positive".into()));
    }
    boundary.validate()?;
    validate_ratios(ratios)?;
    if opts.margin < 0.0 {
        return Err(Error::Config("margin must be nonnegative".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(n);
    let mut counts = [0usize; 2];
    // Class targets for balanced mode: Weevil gets the floor half.
    let targets = [n - n / 2, n / 2];

    let max_attempts = 10_000_usize.max(n.saturating_mul(2000));
    let mut attempts = 0usize;
    while examples.len() < n {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::DegenerateData(format!(
                "gave up after {attempts} draws: boundary/margin/balance reject almost everything \
                 ({} of {} accepted)",
                examples.len(),
                n
            )));
        }
        let head: f64 = rng.random();
        let body: f64 = rng.random();
        let tail: f64 = rng.random();
        let texture: f64 = rng.random();
        if opts.margin > 0.0 && boundary.signed_distance(head, body).abs() < opts.margin {
            continue;
        }
        let label = assign_label(head, body, &boundary);
        if opts.balance && counts[label.index()] >= targets[label.index()] {
            continue;
        }
        counts[label.index()] += 1;
        examples.push(InsectExample {
            id: examples.len() as u32,
            head,
            body,
            tail,
            texture,
            label,
        });
    }

    let (n_train, n_val, _n_test) = split_sizes(n, ratios);
    let mut order: Vec<usize> = (0..n).collect();
    // Fisher-Yates on the same stream keeps the whole procedure one-seed.
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }

    let take = |range: std::ops::Range<usize>| -> Vec<InsectExample> {
        order[range].iter().map(|&i| examples[i]).collect()
    };
    let dataset = SplitDataset {
        train: take(0..n_train),
        val: take(n_train..n_train + n_val),
        test: take(n_train + n_val..n),
        boundary,
        seed,
    };

    let train_counts = dataset.class_counts(Split::Train);
    if train_counts.contains(&0) {
        log::warn!(
            "train split is single-class (counts {:?}); downstream 1-NN and triplet \
             operations will fail",
            train_counts
        );
    }
    Ok(dataset)
}

fn validate_ratios(ratios: (f64, f64, f64)) -> Result<()> {
    let (a, b, c) = ratios;
    if a <= 0.0 || b <= 0.0 || c <= 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must be positive and sum to 1, got ({a}, {b}, {c})"
        )));
    }
    Ok(())
}

fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    let n_train = ((n as f64) * ratios.0).round() as usize;
    let n_val = (((n as f64) * ratios.1).round() as usize).min(n - n_train);
    (n_train, n_val, n - n_train - n_val)
}

/// Fixed random nonlinear feature lifting: `tanh(A x + b) + noise`.
///
/// `A` and `b` are frozen by `seed`; the additive noise is drawn
/// deterministically per example id so lifting stays a pure function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftConfig {
    pub dim: usize,
    pub noise: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct FeatureLift {
    proj: Array2<f64>,
    bias: Vec<f64>,
    noise: f64,
    seed: u64,
}

impl FeatureLift {
    pub fn new(cfg: &LiftConfig) -> Result<FeatureLift> {
        if cfg.dim == 0 {
            return Err(Error::Config("lift dimension must be positive".into()));
        }
        if cfg.noise < 0.0 {
            return Err(Error::Config("lift noise must be nonnegative".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, 1.0).expect("valid normal");
        let proj = Array2::from_shape_fn((cfg.dim, NUM_FEATURES), |_| normal.sample(&mut rng));
        let bias = (0..cfg.dim)
            .map(|_| normal.sample(&mut rng) * 0.1)
            .collect();
        Ok(FeatureLift {
            proj,
            bias,
            noise: cfg.noise,
            seed: cfg.seed,
        })
    }

    pub fn dim(&self) -> usize {
        self.proj.nrows()
    }

    pub fn apply(&self, x: &InsectExample) -> Vec<f64> {
        let feats = x.features();
        let mut out = Vec::with_capacity(self.dim());
        for (row, b) in self.proj.rows().into_iter().zip(&self.bias) {
            let z: f64 = row.iter().zip(feats.iter()).map(|(a, f)| a * f).sum();
            out.push((z + b).tanh());
        }
        if self.noise > 0.0 {
            let mut rng =
                ChaCha8Rng::seed_from_u64(self.seed ^ (0x9e37_79b9_7f4a_7c15 ^ u64::from(x.id)));
            let normal = Normal::new(0.0, self.noise).expect("valid normal");
            for v in &mut out {
                *v += normal.sample(&mut rng);
            }
        }
        out
    }
}

/// Model-input features for one example: raw 4-vector, or the lifted vector.
pub fn lift_features(x: &InsectExample, lift: Option<&FeatureLift>) -> Vec<f64> {
    match lift {
        None => x.features().to_vec(),
        Some(l) => l.apply(x),
    }
}

/// Model-input feature matrices for a whole dataset, plus id lookup tables.
///
/// The synthetic human always judges raw features; models consume these rows.
#[derive(Debug, Clone)]
pub struct FeatureTable {
    xs: [Array2<f64>; 3],
    labels: [Vec<Label>; 3],
    ids: [Vec<u32>; 3],
    id_to_row: HashMap<u32, (Split, usize)>,
    input_dim: usize,
}

impl FeatureTable {
    pub fn new(data: &SplitDataset, lift: Option<&FeatureLift>) -> FeatureTable {
        let input_dim = lift.map_or(NUM_FEATURES, |l| l.dim());
        let mut xs: Vec<Array2<f64>> = Vec::with_capacity(3);
        let mut labels: Vec<Vec<Label>> = Vec::with_capacity(3);
        let mut ids: Vec<Vec<u32>> = Vec::with_capacity(3);
        let mut id_to_row = HashMap::new();
        for &s in &Split::ALL {
            let examples = data.split(s);
            let mut m = Array2::zeros((examples.len(), input_dim));
            for (i, e) in examples.iter().enumerate() {
                let row = lift_features(e, lift);
                for (j, v) in row.iter().enumerate() {
                    m[[i, j]] = *v;
                }
                id_to_row.insert(e.id, (s, i));
            }
            xs.push(m);
            labels.push(examples.iter().map(|e| e.label).collect());
            ids.push(examples.iter().map(|e| e.id).collect());
        }
        let mut xs = xs.into_iter();
        let mut labels = labels.into_iter();
        let mut ids = ids.into_iter();
        FeatureTable {
            xs: [xs.next().unwrap(), xs.next().unwrap(), xs.next().unwrap()],
            labels: [
                labels.next().unwrap(),
                labels.next().unwrap(),
                labels.next().unwrap(),
            ],
            ids: [
                ids.next().unwrap(),
                ids.next().unwrap(),
                ids.next().unwrap(),
            ],
            id_to_row,
            input_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn x(&self, s: Split) -> ArrayView2<'_, f64> {
        self.xs[split_idx(s)].view()
    }

    pub fn labels(&self, s: Split) -> &[Label] {
        &self.labels[split_idx(s)]
    }

    pub fn ids(&self, s: Split) -> &[u32] {
        &self.ids[split_idx(s)]
    }

    pub fn row(&self, s: Split, i: usize) -> ArrayView1<'_, f64> {
        self.xs[split_idx(s)].row(i)
    }

    /// Locate an example id across splits.
    pub fn locate(&self, id: u32) -> Option<(Split, usize)> {
        self.id_to_row.get(&id).copied()
    }

    /// Row index of a train-split id.
    pub fn train_row(&self, id: u32) -> Result<usize> {
        match self.locate(id) {
            Some((Split::Train, i)) => Ok(i),
            _ => Err(Error::UnknownId(id)),
        }
    }
}

fn split_idx(s: Split) -> usize {
    match s {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    }
}

/// Nine significant digits, as persisted in CSV files.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.8e}")
}

impl SplitDataset {
    /// Write the dataset as CSV. One metadata comment line, then the header
    /// `id,head,body,tail,texture,label,split` and one row per example.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            out,
            "# boundary={} seed={}",
            boundary_tag(&self.boundary),
            self.seed
        )?;
        writeln!(out, "id,head,body,tail,texture,label,split")?;
        for (split, e) in self.iter_all() {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                e.id,
                fmt_f64(e.head),
                fmt_f64(e.body),
                fmt_f64(e.tail),
                fmt_f64(e.texture),
                e.label,
                split
            )?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<SplitDataset> {
        let pstr = path.display().to_string();
        let perr = |line: usize, msg: String| Error::Parse {
            path: pstr.clone(),
            line,
            msg,
        };
        let file = std::fs::File::open(path)?;
        let mut lines = BufReader::new(file).lines().enumerate();

        let (_, meta) = lines
            .next()
            .ok_or_else(|| perr(1, "empty file".into()))
            .and_then(|(i, l)| Ok((i, l?)))?;
        let (boundary, seed) =
            parse_meta(&meta).ok_or_else(|| perr(1, format!("bad metadata line: {meta}")))?;

        let (_, header) = lines
            .next()
            .ok_or_else(|| perr(2, "missing header".into()))
            .and_then(|(i, l)| Ok((i, l?)))?;
        if header.trim() != "id,head,body,tail,texture,label,split" {
            return Err(perr(2, format!("unexpected header: {header}")));
        }

        let mut ds = SplitDataset {
            train: vec![],
            val: vec![],
            test: vec![],
            boundary,
            seed,
        };
        for (i, line) in lines {
            let lineno = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 7 {
                return Err(perr(
                    lineno,
                    format!("expected 7 fields, got {}", fields.len()),
                ));
            }
            let id: u32 = fields[0]
                .parse()
                .map_err(|e| perr(lineno, format!("bad id: {e}")))?;
            let mut feats = [0.0f64; 4];
            for (k, f) in feats.iter_mut().enumerate() {
                *f = fields[k + 1]
                    .parse()
                    .map_err(|e| perr(lineno, format!("bad feature: {e}")))?;
            }
            let label = match fields[5] {
                "0" => Label::Vespula,
                "1" => Label::Weevil,
                other => return Err(perr(lineno, format!("bad label: {other}"))),
            };
            let split = Split::parse(fields[6])
                .ok_or_else(|| perr(lineno, format!("bad split: {}", fields[6])))?;
            let e = InsectExample {
                id,
                head: feats[0],
                body: feats[1],
                tail: feats[2],
                texture: feats[3],
                label,
            };
            match split {
                Split::Train => ds.train.push(e),
                Split::Val => ds.val.push(e),
                Split::Test => ds.test.push(e),
            }
        }
        Ok(ds)
    }
}

fn boundary_tag(b: &DecisionBoundary) -> String {
    match *b {
        DecisionBoundary::Square { lo, hi } => format!("square:{lo}:{hi}"),
        DecisionBoundary::Linear {
            w_head,
            w_body,
            offset,
        } => format!("linear:{w_head}:{w_body}:{offset}"),
    }
}

fn parse_meta(line: &str) -> Option<(DecisionBoundary, u64)> {
    let rest = line.strip_prefix('#')?.trim();
    let mut boundary = None;
    let mut seed = None;
    for tok in rest.split_whitespace() {
        if let Some(v) = tok.strip_prefix("boundary=") {
            let parts: Vec<&str> = v.split(':').collect();
            boundary = match parts.as_slice() {
                ["square", lo, hi] => Some(DecisionBoundary::Square {
                    lo: lo.parse().ok()?,
                    hi: hi.parse().ok()?,
                }),
                ["linear", wh, wb, off] => Some(DecisionBoundary::Linear {
                    w_head: wh.parse().ok()?,
                    w_body: wb.parse().ok()?,
                    offset: off.parse().ok()?,
                }),
                _ => None,
            };
        } else if let Some(v) = tok.strip_prefix("seed=") {
            seed = v.parse().ok();
        }
    }
    Some((boundary?, seed?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SQUARE: DecisionBoundary = DecisionBoundary::Square { lo: 0.35, hi: 0.65 };

    #[test]
    fn assign_label_square_center_is_weevil() {
        assert_eq!(assign_label(0.5, 0.5, &SQUARE), Label::Weevil);
    }

    #[test]
    fn assign_label_square_head_outside_is_vespula() {
        assert_eq!(assign_label(0.0, 0.5, &SQUARE), Label::Vespula);
    }

    #[test]
    fn assign_label_linear() {
        let b = DecisionBoundary::Linear {
            w_head: 1.0,
            w_body: 1.0,
            offset: 1.0,
        };
        assert_eq!(assign_label(0.9, 0.9, &b), Label::Weevil);
        assert_eq!(assign_label(0.1, 0.2, &b), Label::Vespula);
    }

    #[test]
    fn generate_dataset_split_sizes() {
        let ds = generate_dataset(2000, SQUARE, (0.6, 0.2, 0.2), 7).unwrap();
        assert_eq!(ds.train.len(), 1200);
        assert_eq!(ds.val.len(), 400);
        assert_eq!(ds.test.len(), 400);

        let small = generate_dataset(10, SQUARE, (0.6, 0.2, 0.2), 0).unwrap();
        assert_eq!(
            (small.train.len(), small.val.len(), small.test.len()),
            (6, 2, 2)
        );
    }

    #[test]
    fn generate_dataset_is_deterministic() {
        let a = generate_dataset(500, SQUARE, (0.6, 0.2, 0.2), 42).unwrap();
        let b = generate_dataset(500, SQUARE, (0.6, 0.2, 0.2), 42).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(500, SQUARE, (0.6, 0.2, 0.2), 43).unwrap();
        assert_ne!(a, c);

        // Identical arguments give byte-identical persisted files.
        let dir = tempfile::tempdir().unwrap();
        let pa = dir.path().join("a.csv");
        let pb = dir.path().join("b.csv");
        a.save_csv(&pa).unwrap();
        b.save_csv(&pb).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    }

    #[test]
    fn labels_match_boundary_and_are_idempotent() {
        let ds = generate_dataset(1000, SQUARE, (0.6, 0.2, 0.2), 3).unwrap();
        for (_, e) in ds.iter_all() {
            assert_eq!(e.label, assign_label(e.head, e.body, &ds.boundary));
            assert!([e.head, e.body, e.tail, e.texture]
                .iter()
                .all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn natural_weevil_fraction_matches_region_area() {
        // Area of [0.35, 0.65]^2 is 0.09; check within 3 binomial sigmas.
        for seed in [0, 1, 2, 3, 4] {
            let ds = generate_dataset(2000, SQUARE, (0.6, 0.2, 0.2), seed).unwrap();
            let weevils = ds
                .iter_all()
                .filter(|(_, e)| e.label == Label::Weevil)
                .count();
            let f = weevils as f64 / 2000.0;
            let sigma = (0.09f64 * 0.91 / 2000.0).sqrt();
            assert!(
                (f - 0.09).abs() <= 3.0 * sigma,
                "seed {seed}: weevil fraction {f} outside 3 sigma of 0.09"
            );
        }
    }

    #[test]
    fn balanced_sampling_hits_even_split() {
        let ds = generate_dataset_with(
            2000,
            SQUARE,
            (0.6, 0.2, 0.2),
            11,
            SampleOptions {
                balance: true,
                margin: 0.08,
            },
        )
        .unwrap();
        let mut counts = [0usize; 2];
        for (_, e) in ds.iter_all() {
            counts[e.label.index()] += 1;
            assert!(ds.boundary.signed_distance(e.head, e.body).abs() >= 0.08);
        }
        assert_eq!(counts, [1000, 1000]);
    }

    #[test]
    fn degenerate_boundary_is_rejected() {
        let b = DecisionBoundary::Linear {
            w_head: 1.0,
            w_body: 1.0,
            offset: 10.0, // unreachable: no Weevil exists
        };
        let err = generate_dataset_with(
            100,
            b,
            (0.6, 0.2, 0.2),
            0,
            SampleOptions {
                balance: true,
                margin: 0.0,
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::DegenerateData(_)));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(generate_dataset(0, SQUARE, (0.6, 0.2, 0.2), 0).is_err());
        assert!(generate_dataset(10, SQUARE, (0.6, 0.2, 0.3), 0).is_err());
        assert!(generate_dataset(
            10,
            DecisionBoundary::Square { lo: 0.7, hi: 0.3 },
            (0.6, 0.2, 0.2),
            0
        )
        .is_err());
    }

    #[test]
    fn lift_absent_returns_raw_features() {
        let e = InsectExample {
            id: 0,
            head: 0.1,
            body: 0.2,
            tail: 0.3,
            texture: 0.4,
            label: Label::Vespula,
        };
        assert_eq!(lift_features(&e, None), vec![0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn lift_is_deterministic_and_separating() {
        let lift = FeatureLift::new(&LiftConfig {
            dim: 32,
            noise: 0.0,
            seed: 5,
        })
        .unwrap();
        let ds = generate_dataset(100, SQUARE, (0.6, 0.2, 0.2), 1).unwrap();
        for e in &ds.train {
            assert_eq!(lift.apply(e), lift.apply(e));
        }
        // 100 pairs differing in one feature must map to different outputs.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let base = ds.train[rng.random_range(0..ds.train.len())];
            let mut other = base;
            match rng.random_range(0..4) {
                0 => other.head = (other.head + 0.31) % 1.0,
                1 => other.body = (other.body + 0.31) % 1.0,
                2 => other.tail = (other.tail + 0.31) % 1.0,
                _ => other.texture = (other.texture + 0.31) % 1.0,
            }
            assert_ne!(lift.apply(&base), lift.apply(&other));
        }
    }

    #[test]
    fn lift_noise_is_deterministic_per_example() {
        let lift = FeatureLift::new(&LiftConfig {
            dim: 8,
            noise: 0.05,
            seed: 5,
        })
        .unwrap();
        let e = InsectExample {
            id: 17,
            head: 0.5,
            body: 0.5,
            tail: 0.5,
            texture: 0.5,
            label: Label::Weevil,
        };
        assert_eq!(lift.apply(&e), lift.apply(&e));
        let mut e2 = e;
        e2.id = 18;
        assert_ne!(lift.apply(&e), lift.apply(&e2));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let ds = generate_dataset(200, SQUARE, (0.6, 0.2, 0.2), 21).unwrap();
        ds.save_csv(&path).unwrap();
        let loaded = SplitDataset::load_csv(&path).unwrap();
        assert_eq!(ds.boundary, loaded.boundary);
        assert_eq!(ds.seed, loaded.seed);
        assert_eq!(ds.train.len(), loaded.train.len());
        for (a, b) in ds.iter_all().zip(loaded.iter_all()) {
            assert_eq!(a.0, b.0);
            assert_eq!(a.1.id, b.1.id);
            assert_eq!(a.1.label, b.1.label);
            assert!((a.1.head - b.1.head).abs() < 1e-8);
        }
    }

    #[test]
    fn feature_table_locates_ids() {
        let ds = generate_dataset(50, SQUARE, (0.6, 0.2, 0.2), 2).unwrap();
        let table = FeatureTable::new(&ds, None);
        assert_eq!(table.input_dim(), 4);
        for (s, e) in ds.iter_all() {
            let (s2, row) = table.locate(e.id).unwrap();
            assert_eq!(s, s2);
            assert_eq!(table.row(s, row)[0], e.head);
            assert_eq!(table.labels(s)[row], e.label);
        }
    }

    proptest! {
        #[test]
        fn splits_are_disjoint_and_cover(
            n in 3usize..400,
            seed in 0u64..1000,
            r1 in 0.2f64..0.7,
            r2 in 0.1f64..0.25,
        ) {
            let r3 = 1.0 - r1 - r2;
            prop_assume!(r3 > 0.05);
            let ds = generate_dataset(n, SQUARE, (r1, r2, r3), seed).unwrap();
            let mut ids: Vec<u32> = ds.iter_all().map(|(_, e)| e.id).collect();
            ids.sort_unstable();
            let expect: Vec<u32> = (0..n as u32).collect();
            prop_assert_eq!(ids, expect);
            let total = ds.train.len() + ds.val.len() + ds.test.len();
            prop_assert_eq!(total, n);
            prop_assert!((ds.train.len() as f64 - n as f64 * r1).abs() <= 1.0);
            prop_assert!((ds.val.len() as f64 - n as f64 * r2).abs() <= 1.0);
        }
    }
}
