//! Triplet datasets: sampling, labeling, filtering and persistence.
//!
//! A triplet records that, for a reference example, the simulated human
//! judged one train candidate closer than the other. Besides plain
//! human-judged sets, two ablation variants exist: label-derived triplets
//! built from class labels alone, and intra-class triplets whose candidate
//! pair shares one class and therefore carries no label signal.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Label, Split, SplitDataset};
use crate::error::{Error, Result};
use crate::oracle::{judge_triplet, SimilarityOracle};

/// One ordered human-judgment tuple. Candidates always refer to train-split
/// ids; the reference may come from any split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub ref_split: Split,
    pub ref_id: u32,
    pub pos_id: u32,
    pub neg_id: u32,
    pub tie: bool,
}

/// Provenance of a triplet set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletVariant {
    Human,
    HumanFiltered,
    LabelDerived,
    IntraClass,
}

impl TripletVariant {
    pub fn name(self) -> &'static str {
        match self {
            TripletVariant::Human => "human",
            TripletVariant::HumanFiltered => "human_filtered",
            TripletVariant::LabelDerived => "label_derived",
            TripletVariant::IntraClass => "intra_class",
        }
    }

    pub fn parse(s: &str) -> Option<TripletVariant> {
        match s {
            "human" => Some(TripletVariant::Human),
            "human_filtered" => Some(TripletVariant::HumanFiltered),
            "label_derived" => Some(TripletVariant::LabelDerived),
            "intra_class" => Some(TripletVariant::IntraClass),
            _ => None,
        }
    }
}

impl fmt::Display for TripletVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A collection of triplets with shared provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletSet {
    pub triplets: Vec<Triplet>,
    pub variant: TripletVariant,
    pub oracle_weights: Option<[f64; 4]>,
    pub split_tag: Split,
    pub seed: u64,
}

impl TripletSet {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    /// Check structural and variant invariants against the dataset the ids
    /// refer to.
    pub fn validate_against(&self, data: &SplitDataset) -> Result<()> {
        for (i, t) in self.triplets.iter().enumerate() {
            if t.pos_id == t.neg_id {
                return Err(Error::Config(format!(
                    "triplet {i}: pos and neg are the same id {}",
                    t.pos_id
                )));
            }
            let lookup = TripletLabels::resolve(t, data)?;
            if t.ref_split == Split::Train && (t.ref_id == t.pos_id || t.ref_id == t.neg_id) {
                return Err(Error::Config(format!(
                    "triplet {i}: train reference {} collides with a candidate",
                    t.ref_id
                )));
            }
            match self.variant {
                TripletVariant::Human => {}
                TripletVariant::HumanFiltered => {
                    if lookup.is_classification_inconsistent() {
                        return Err(Error::Config(format!(
                            "triplet {i}: classification-inconsistent entry in a filtered set"
                        )));
                    }
                }
                TripletVariant::LabelDerived => {
                    if !(lookup.r == lookup.p && lookup.p != lookup.n) {
                        return Err(Error::Config(format!(
                            "triplet {i}: label pattern violates the label-derived contract"
                        )));
                    }
                }
                TripletVariant::IntraClass => {
                    if lookup.p != lookup.n {
                        return Err(Error::Config(format!(
                            "triplet {i}: candidates span classes in an intra-class set"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

struct TripletLabels {
    r: Label,
    p: Label,
    n: Label,
}

impl TripletLabels {
    fn resolve(t: &Triplet, data: &SplitDataset) -> Result<TripletLabels> {
        let find = |split: Split, id: u32| -> Result<Label> {
            data.split(split)
                .iter()
                .find(|e| e.id == id)
                .map(|e| e.label)
                .ok_or(Error::UnknownId(id))
        };
        Ok(TripletLabels {
            r: find(t.ref_split, t.ref_id)?,
            p: find(Split::Train, t.pos_id)?,
            n: find(Split::Train, t.neg_id)?,
        })
    }

    /// The human chose the wrong-class candidate over a right-class one.
    fn is_classification_inconsistent(&self) -> bool {
        self.p != self.r && self.n == self.r
    }
}

/// Draw two distinct indices from `0..m`, optionally excluding one index.
fn two_distinct(rng: &mut ChaCha8Rng, m: usize, exclude: Option<usize>) -> (usize, usize) {
    let skip = |v: usize, banned: &[usize]| -> usize {
        let mut v = v;
        let mut banned = banned.to_vec();
        banned.sort_unstable();
        for b in banned {
            if v >= b {
                v += 1;
            }
        }
        v
    };
    match exclude {
        None => {
            let a = rng.random_range(0..m);
            let b = skip(rng.random_range(0..m - 1), &[a]);
            (a, b)
        }
        Some(x) => {
            let a = skip(rng.random_range(0..m - 1), &[x]);
            let b = skip(rng.random_range(0..m - 2), &[x.min(a), x.max(a)]);
            (a, b)
        }
    }
}

/// Sample `n` triplets: a reference uniform from `ref_split`, two distinct
/// candidates uniform from train (never equal to a train reference), ordered
/// into (pos, neg) by the simulated human.
pub fn sample_and_label(
    data: &SplitDataset,
    n: usize,
    ref_split: Split,
    o: &SimilarityOracle,
    seed: u64,
) -> Result<TripletSet> {
    if n == 0 {
        return Err(Error::Config("triplet count must be positive".into()));
    }
    if data.train.len() < 3 {
        return Err(Error::DegenerateData(
            "triplet sampling needs at least 3 train examples".into(),
        ));
    }
    if data.split(ref_split).is_empty() {
        return Err(Error::DegenerateData(format!(
            "reference split {ref_split} is empty"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let refs = data.split(ref_split);
    let m = data.train.len();
    let mut triplets = Vec::with_capacity(n);
    for _ in 0..n {
        let r_idx = rng.random_range(0..refs.len());
        let reference = &refs[r_idx];
        let exclude = if ref_split == Split::Train {
            Some(r_idx)
        } else {
            None
        };
        let (a, b) = two_distinct(&mut rng, m, exclude);
        let (c1, c2) = (&data.train[a], &data.train[b]);
        let j = judge_triplet(reference, c1, c2, o);
        let (pos, neg) = if j.first { (c1, c2) } else { (c2, c1) };
        triplets.push(Triplet {
            ref_split,
            ref_id: reference.id,
            pos_id: pos.id,
            neg_id: neg.id,
            tie: j.tie,
        });
    }
    Ok(TripletSet {
        triplets,
        variant: TripletVariant::Human,
        oracle_weights: Some(o.weights()),
        split_tag: ref_split,
        seed,
    })
}

/// Remove classification-inconsistent triplets: those whose chosen candidate
/// is from a different class than the reference while the rejected candidate
/// shares the reference's class. Survivor order is preserved.
pub fn filter_inconsistent(t: &TripletSet, data: &SplitDataset) -> Result<TripletSet> {
    match t.variant {
        TripletVariant::Human | TripletVariant::HumanFiltered => {}
        other => {
            return Err(Error::Config(format!(
                "filtering applies to human triplet sets, got variant {other}"
            )))
        }
    }
    let mut kept = Vec::with_capacity(t.triplets.len());
    for trip in &t.triplets {
        let labels = TripletLabels::resolve(trip, data)?;
        if !labels.is_classification_inconsistent() {
            kept.push(*trip);
        }
    }
    Ok(TripletSet {
        triplets: kept,
        variant: TripletVariant::HumanFiltered,
        oracle_weights: t.oracle_weights,
        split_tag: t.split_tag,
        seed: t.seed,
    })
}

/// Build triplets purely from class labels: positive from the reference's
/// class, negative from the other class. Carries no perceptual information.
pub fn derive_label_triplets(data: &SplitDataset, n: usize, seed: u64) -> Result<TripletSet> {
    if n == 0 {
        return Err(Error::Config("triplet count must be positive".into()));
    }
    let by_class = train_indices_by_class(data);
    if by_class.iter().any(|c| c.is_empty()) {
        return Err(Error::DegenerateData(
            "label-derived triplets need both classes in the train split".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = data.train.len();
    let mut triplets = Vec::with_capacity(n);
    for _ in 0..n {
        let r_idx = rng.random_range(0..m);
        let reference = &data.train[r_idx];
        let same = &by_class[reference.label.index()];
        let other = &by_class[reference.label.other().index()];
        if same.len() < 2 {
            return Err(Error::DegenerateData(format!(
                "class {} has a single train example; cannot pick a distinct positive",
                reference.label
            )));
        }
        // Uniform positive from the reference's class, excluding the reference.
        let r_pos_in_class = same
            .iter()
            .position(|&i| i == r_idx)
            .expect("reference is in its own class");
        let mut p = rng.random_range(0..same.len() - 1);
        if p >= r_pos_in_class {
            p += 1;
        }
        let pos = &data.train[same[p]];
        let neg = &data.train[other[rng.random_range(0..other.len())]];
        triplets.push(Triplet {
            ref_split: Split::Train,
            ref_id: reference.id,
            pos_id: pos.id,
            neg_id: neg.id,
            tie: false,
        });
    }
    Ok(TripletSet {
        triplets,
        variant: TripletVariant::LabelDerived,
        oracle_weights: None,
        split_tag: Split::Train,
        seed,
    })
}

/// Sample triplets whose candidate pair comes from a single uniformly chosen
/// class, ordered by the simulated human. Such triplets carry perceptual but
/// no label information.
pub fn sample_intraclass(
    data: &SplitDataset,
    n: usize,
    o: &SimilarityOracle,
    seed: u64,
) -> Result<TripletSet> {
    if n == 0 {
        return Err(Error::Config("triplet count must be positive".into()));
    }
    let by_class = train_indices_by_class(data);
    if by_class.iter().any(|c| c.len() < 2) {
        return Err(Error::DegenerateData(
            "intra-class triplets need at least 2 train examples per class".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = data.train.len();
    let mut triplets = Vec::with_capacity(n);
    for _ in 0..n {
        let r_idx = rng.random_range(0..m);
        let reference = &data.train[r_idx];
        let class = rng.random_range(0..2usize);
        let members = &by_class[class];
        let r_in_members = members.iter().position(|&i| i == r_idx);
        let eligible = members.len() - usize::from(r_in_members.is_some());
        if eligible < 2 {
            return Err(Error::DegenerateData(format!(
                "class {class} has too few train examples besides the reference"
            )));
        }
        let (mut a, mut b) = two_distinct(&mut rng, eligible, None);
        if let Some(rm) = r_in_members {
            if a >= rm {
                a += 1;
            }
            if b >= rm {
                b += 1;
            }
        }
        let (c1, c2) = (&data.train[members[a]], &data.train[members[b]]);
        let j = judge_triplet(reference, c1, c2, o);
        let (pos, neg) = if j.first { (c1, c2) } else { (c2, c1) };
        triplets.push(Triplet {
            ref_split: Split::Train,
            ref_id: reference.id,
            pos_id: pos.id,
            neg_id: neg.id,
            tie: j.tie,
        });
    }
    Ok(TripletSet {
        triplets,
        variant: TripletVariant::IntraClass,
        oracle_weights: Some(o.weights()),
        split_tag: Split::Train,
        seed,
    })
}

fn train_indices_by_class(data: &SplitDataset) -> [Vec<usize>; 2] {
    let mut by_class: [Vec<usize>; 2] = [vec![], vec![]];
    for (i, e) in data.train.iter().enumerate() {
        by_class[e.label.index()].push(i);
    }
    by_class
}

impl TripletSet {
    /// Persist as CSV: one metadata line, then `ref_split,ref_id,pos_id,neg_id,tie` rows.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let weights = match &self.oracle_weights {
            None => "none".to_string(),
            Some(w) => w
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
        };
        writeln!(
            out,
            "# variant={} weights={} seed={}",
            self.variant, weights, self.seed
        )?;
        for t in &self.triplets {
            writeln!(
                out,
                "{},{},{},{},{}",
                t.ref_split,
                t.ref_id,
                t.pos_id,
                t.neg_id,
                u8::from(t.tie)
            )?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TripletSet> {
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
            .ok_or_else(|| perr(1, "empty file, expected a metadata line".into()))
            .and_then(|(i, l)| Ok((i, l?)))?;
        let (variant, oracle_weights, seed) =
            parse_meta(&meta).ok_or_else(|| perr(1, format!("bad metadata line: {meta}")))?;

        let mut triplets = Vec::new();
        let mut split_tag: Option<Split> = None;
        for (i, line) in lines {
            let lineno = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(perr(
                    lineno,
                    format!("expected 5 fields, got {}", fields.len()),
                ));
            }
            let ref_split = Split::parse(fields[0])
                .ok_or_else(|| perr(lineno, format!("bad ref_split: {}", fields[0])))?;
            let ref_id: u32 = fields[1]
                .parse()
                .map_err(|e| perr(lineno, format!("bad ref_id: {e}")))?;
            let pos_id: u32 = fields[2]
                .parse()
                .map_err(|e| perr(lineno, format!("bad pos_id: {e}")))?;
            let neg_id: u32 = fields[3]
                .parse()
                .map_err(|e| perr(lineno, format!("bad neg_id: {e}")))?;
            let tie = match fields[4] {
                "0" => false,
                "1" => true,
                other => return Err(perr(lineno, format!("bad tie flag: {other}"))),
            };
            if pos_id == neg_id {
                return Err(perr(lineno, format!("pos_id equals neg_id ({pos_id})")));
            }
            match split_tag {
                None => split_tag = Some(ref_split),
                Some(s) if s != ref_split => {
                    return Err(perr(lineno, "mixed reference splits in one set".into()))
                }
                _ => {}
            }
            triplets.push(Triplet {
                ref_split,
                ref_id,
                pos_id,
                neg_id,
                tie,
            });
        }
        Ok(TripletSet {
            triplets,
            variant,
            oracle_weights,
            split_tag: split_tag.unwrap_or(Split::Train),
            seed,
        })
    }
}

fn parse_meta(line: &str) -> Option<(TripletVariant, Option<[f64; 4]>, u64)> {
    let rest = line.strip_prefix('#')?.trim();
    let mut variant = None;
    let mut weights = None;
    let mut seed = None;
    for tok in rest.split_whitespace() {
        if let Some(v) = tok.strip_prefix("variant=") {
            variant = TripletVariant::parse(v);
        } else if let Some(v) = tok.strip_prefix("weights=") {
            if v == "none" {
                weights = Some(None);
            } else {
                let parts: Vec<&str> = v.split(',').collect();
                if parts.len() != 4 {
                    return None;
                }
                let mut w = [0.0; 4];
                for (slot, p) in w.iter_mut().zip(&parts) {
                    *slot = p.parse().ok()?;
                }
                weights = Some(Some(w));
            }
        } else if let Some(v) = tok.strip_prefix("seed=") {
            seed = v.parse().ok();
        }
    }
    Some((variant?, weights?, seed?))
}
