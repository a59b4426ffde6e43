//! Class-balanced batch construction and triplet mining.
//!
//! Every miner emits one triplet per valid anchor (an anchor with at least
//! one in-batch positive and one negative), in anchor order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::losses::EmbeddingBatch;
use crate::numerics::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub classes_per_batch: usize,
    pub samples_per_class: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self {
            classes_per_batch: 8,
            samples_per_class: 4,
        }
    }
}

impl BatchSpec {
    pub fn new(classes_per_batch: usize, samples_per_class: usize) -> Result<Self> {
        let spec = Self {
            classes_per_batch,
            samples_per_class,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes_per_batch < 2 || self.samples_per_class < 2 {
            return Err(Error::Unsatisfiable(format!(
                "batch spec {}x{}: both factors must be >= 2",
                self.classes_per_batch, self.samples_per_class
            )));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.classes_per_batch * self.samples_per_class
    }
}

/// Groups sample indices by label, classes in ascending order.
pub fn class_index(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    by_class
}

/// Draws `classes_per_batch` distinct classes and `samples_per_class` samples
/// of each (with replacement only for classes that are too small).
pub fn sample_batch(labels: &[usize], spec: &BatchSpec, rng: &mut Rng) -> Result<Vec<usize>> {
    spec.validate()?;
    let by_class = class_index(labels);
    if by_class.len() < 2 {
        return Err(Error::Unsatisfiable(format!(
            "dataset has {} class(es), need at least 2",
            by_class.len()
        )));
    }
    if by_class.len() < spec.classes_per_batch {
        return Err(Error::Unsatisfiable(format!(
            "dataset has {} classes, batch asks for {}",
            by_class.len(),
            spec.classes_per_batch
        )));
    }
    let classes: Vec<&Vec<usize>> = by_class.values().collect();
    let mut out = Vec::with_capacity(spec.batch_size());
    for c in rng.sample_indices(classes.len(), spec.classes_per_batch) {
        let members = classes[c];
        if members.len() >= spec.samples_per_class {
            for k in rng.sample_indices(members.len(), spec.samples_per_class) {
                out.push(members[k]);
            }
        } else {
            for _ in 0..spec.samples_per_class {
                out.push(members[rng.below(members.len())]);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

impl Triplet {
    pub fn new(anchor: usize, positive: usize, negative: usize) -> Self {
        Self {
            anchor,
            positive,
            negative,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MinedTriplets(Vec<Triplet>);

impl MinedTriplets {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Triplet> {
        self.0.iter()
    }

    pub fn as_slice(&self) -> &[Triplet] {
        &self.0
    }

    /// Anchor/positive share a label, the negative does not, indices in range.
    pub fn all_valid(&self, batch: &EmbeddingBatch) -> bool {
        let n = batch.len();
        self.0.iter().all(|t| {
            t.anchor < n
                && t.positive < n
                && t.negative < n
                && batch.is_positive(t.anchor, t.positive)
                && batch.is_negative(t.anchor, t.negative)
        })
    }
}

impl From<Vec<Triplet>> for MinedTriplets {
    fn from(v: Vec<Triplet>) -> Self {
        Self(v)
    }
}

struct Anchor {
    index: usize,
    positives: Vec<usize>,
    negatives: Vec<usize>,
}

fn valid_anchors(batch: &EmbeddingBatch) -> Result<Vec<Anchor>> {
    let n = batch.len();
    let anchors: Vec<Anchor> = (0..n)
        .map(|i| Anchor {
            index: i,
            positives: (0..n).filter(|&j| batch.is_positive(i, j)).collect(),
            negatives: (0..n).filter(|&j| batch.is_negative(i, j)).collect(),
        })
        .filter(|a| !a.positives.is_empty() && !a.negatives.is_empty())
        .collect();
    if anchors.is_empty() {
        return Err(Error::EmptyMining(
            "no anchor has both a positive and a negative",
        ));
    }
    Ok(anchors)
}

/// Uniformly random positive and negative per anchor.
pub fn mine_random(batch: &EmbeddingBatch, rng: &mut Rng) -> Result<MinedTriplets> {
    let anchors = valid_anchors(batch)?;
    Ok(anchors
        .iter()
        .map(|a| {
            let p = a.positives[rng.below(a.positives.len())];
            let n = a.negatives[rng.below(a.negatives.len())];
            Triplet::new(a.index, p, n)
        })
        .collect::<Vec<_>>()
        .into())
}

/// Random positive; negative uniformly from the window
/// `d(a,p) < d(a,n) < d(a,p) + margin`. Without window candidates, the closest
/// negative beyond `d(a,p)`, and failing that a random negative.
pub fn mine_semihard(batch: &EmbeddingBatch, margin: f64, rng: &mut Rng) -> Result<MinedTriplets> {
    if !(margin > 0.0) {
        return Err(Error::OutOfRange(format!(
            "semi-hard margin {margin} must be > 0"
        )));
    }
    let anchors = valid_anchors(batch)?;
    let mut out = Vec::with_capacity(anchors.len());
    for a in &anchors {
        let p = a.positives[rng.below(a.positives.len())];
        let d_ap = batch.distance(a.index, p);
        let window: Vec<usize> = a
            .negatives
            .iter()
            .copied()
            .filter(|&n| {
                let d = batch.distance(a.index, n);
                d > d_ap && d < d_ap + margin
            })
            .collect();
        let n = if let Some(&n) = rng.choose(&window) {
            n
        } else {
            a.negatives
                .iter()
                .map(|&n| (batch.distance(a.index, n), n))
                .filter(|&(d, _)| d > d_ap)
                .min_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)))
                .map(|(_, n)| n)
                .unwrap_or_else(|| a.negatives[rng.below(a.negatives.len())])
        };
        out.push(Triplet::new(a.index, p, n));
    }
    Ok(out.into())
}

/// Positive uniformly from the harder (farther) half of positives; negative
/// uniformly from the harder (closer) half of the negatives that are closer
/// than that positive, or of all negatives when none are.
pub fn mine_softhard(batch: &EmbeddingBatch, rng: &mut Rng) -> Result<MinedTriplets> {
    let anchors = valid_anchors(batch)?;
    let mut out = Vec::with_capacity(anchors.len());
    for a in &anchors {
        let pos: Vec<(f64, usize)> = a
            .positives
            .iter()
            .map(|&p| (batch.distance(a.index, p), p))
            .collect();
        let mut sorted: Vec<f64> = pos.iter().map(|x| x.0).collect();
        sorted.sort_by(f64::total_cmp);
        let threshold = sorted[sorted.len() / 2];
        let hard_pos: Vec<&(f64, usize)> = pos.iter().filter(|x| x.0 >= threshold).collect();
        let &(d_ap, p) = hard_pos[rng.below(hard_pos.len())];

        let neg: Vec<(f64, usize)> = a
            .negatives
            .iter()
            .map(|&n| (batch.distance(a.index, n), n))
            .collect();
        let closer: Vec<(f64, usize)> = neg.iter().copied().filter(|x| x.0 < d_ap).collect();
        let pool = if closer.is_empty() { neg } else { closer };
        let mut sorted: Vec<f64> = pool.iter().map(|x| x.0).collect();
        sorted.sort_by(f64::total_cmp);
        let threshold = sorted[(sorted.len() - 1) / 2];
        let hard_neg: Vec<usize> = pool
            .iter()
            .filter(|x| x.0 <= threshold)
            .map(|x| x.1)
            .collect();
        let n = hard_neg[rng.below(hard_neg.len())];
        out.push(Triplet::new(a.index, p, n));
    }
    Ok(out.into())
}

/// Log-density of pairwise distances between points uniform on the unit
/// sphere in `dim` dimensions, up to a constant.
pub fn log_sphere_distance_density(distance: f64, dim: usize) -> f64 {
    let d = dim as f64;
    let inner = (1.0 - 0.25 * distance * distance).max(1e-8);
    (d - 2.0) * distance.ln() + 0.5 * (d - 3.0) * inner.ln()
}

/// Normalized sampling weights `∝ 1/q(max(d, clip))`, zero at or beyond
/// `cutoff`. Falls back to uniform when every distance is past the cutoff.
pub fn distance_weights(distances: &[f64], dim: usize, clip: f64, cutoff: f64) -> Vec<f64> {
    let log_w: Vec<Option<f64>> = distances
        .iter()
        .map(|&d| (d < cutoff).then(|| -log_sphere_distance_density(d.max(clip), dim)))
        .collect();
    let max = log_w
        .iter()
        .flatten()
        .fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    if !max.is_finite() {
        return vec![1.0 / distances.len() as f64; distances.len()];
    }
    let w: Vec<f64> = log_w
        .iter()
        .map(|lw| lw.map_or(0.0, |x| (x - max).exp()))
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Random positive; negative drawn with [`distance_weights`].
pub fn mine_distance_weighted(
    batch: &EmbeddingBatch,
    clip: f64,
    cutoff: f64,
    rng: &mut Rng,
) -> Result<MinedTriplets> {
    if !(clip > 0.0) {
        return Err(Error::OutOfRange(format!(
            "distance clip {clip} must be > 0"
        )));
    }
    let anchors = valid_anchors(batch)?;
    let mut out = Vec::with_capacity(anchors.len());
    for a in &anchors {
        let p = a.positives[rng.below(a.positives.len())];
        let dists: Vec<f64> = a
            .negatives
            .iter()
            .map(|&n| batch.distance(a.index, n))
            .collect();
        let w = distance_weights(&dists, batch.dim(), clip, cutoff);
        let k = rng
            .choose_weighted(&w)
            .expect("distance weights are normalized");
        out.push(Triplet::new(a.index, p, a.negatives[k]));
    }
    Ok(out.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MinerKind {
    Random,
    SemiHard { margin: f64 },
    SoftHard,
    DistanceWeighted { clip: f64, cutoff: f64 },
}

impl MinerKind {
    pub const SEMIHARD_DEFAULT: MinerKind = MinerKind::SemiHard { margin: 0.2 };
    pub const DISTANCE_DEFAULT: MinerKind = MinerKind::DistanceWeighted {
        clip: 0.5,
        cutoff: 1.4,
    };

    pub fn mine(&self, batch: &EmbeddingBatch, rng: &mut Rng) -> Result<MinedTriplets> {
        match *self {
            MinerKind::Random => mine_random(batch, rng),
            MinerKind::SemiHard { margin } => mine_semihard(batch, margin, rng),
            MinerKind::SoftHard => mine_softhard(batch, rng),
            MinerKind::DistanceWeighted { clip, cutoff } => {
                mine_distance_weighted(batch, clip, cutoff, rng)
            }
        }
    }
}
