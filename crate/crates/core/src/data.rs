//! Feature datasets: synthetic generation, CSV ingestion, class-disjoint
//! splitting and symmetric label noise.
//!
//! CSV layout: a header `label,f0,f1,...,f{d-1}` followed by one sample per
//! line. Noise records export as `index,original,corrupted`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::numerics::{svd, Matrix, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Synthetic,
    Ingested(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseEntry {
    pub index: usize,
    pub original: usize,
    pub corrupted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    features: Matrix,
    labels: Vec<usize>,
    classes: Vec<usize>,
    provenance: Provenance,
    noise: Vec<NoiseEntry>,
}

fn registry(labels: &[usize]) -> Vec<usize> {
    labels
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

impl FeatureDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, provenance: Provenance) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::Dimension {
                context: "dataset labels",
                expected: features.rows(),
                actual: labels.len(),
            });
        }
        Ok(Self {
            classes: registry(&labels),
            features,
            labels,
            provenance,
            noise: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Distinct class ids, ascending.
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn noise_record(&self) -> &[NoiseEntry] {
        &self.noise
    }

    /// Rows at `indices`, in that order. Noise entries follow their samples.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let position: BTreeMap<usize, usize> =
            indices.iter().enumerate().map(|(k, &i)| (i, k)).collect();
        let labels: Vec<usize> = indices.iter().map(|&i| self.labels[i]).collect();
        let noise = self
            .noise
            .iter()
            .filter_map(|e| {
                position
                    .get(&e.index)
                    .map(|&k| NoiseEntry { index: k, ..*e })
            })
            .collect();
        Self {
            features: self.features.select_rows(indices),
            classes: registry(&labels),
            labels,
            provenance: self.provenance.clone(),
            noise,
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write!(w, "label")?;
        for k in 0..self.dim() {
            write!(w, ",f{k}")?;
        }
        writeln!(w)?;
        for (row, y) in self.features.iter_rows().zip(&self.labels) {
            write!(w, "{y}")?;
            for x in row {
                write!(w, ",{x:?}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_noise_record(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "index,original,corrupted")?;
        for e in &self.noise {
            writeln!(w, "{},{},{}", e.index, e.original, e.corrupted)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads the CSV layout described in the module docs.
pub fn ingest_csv(path: &Path) -> Result<FeatureDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                msg: format!("{other:?}"),
            },
        })?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut records = reader.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| parse_err(1, e.to_string()))?,
        None => return Err(parse_err(1, "empty file".into())),
    };
    let dim = header.len().saturating_sub(1);
    let well_formed = header.get(0) == Some("label")
        && dim >= 1
        && header
            .iter()
            .skip(1)
            .enumerate()
            .all(|(k, h)| h == format!("f{k}"));
    if !well_formed {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            line: 1,
            msg: "header must be label,f0,f1,...".into(),
        });
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in records {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() == 1 && record.get(0) == Some("") {
            continue;
        }
        if record.len() != dim + 1 {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                line,
                msg: format!("expected {} columns, found {}", dim + 1, record.len()),
            });
        }
        let label = record[0]
            .parse::<usize>()
            .map_err(|e| parse_err(line, format!("label {:?}: {e}", &record[0])))?;
        labels.push(label);
        for field in record.iter().skip(1) {
            let x = field
                .parse::<f64>()
                .map_err(|e| parse_err(line, format!("feature {field:?}: {e}")))?;
            if !x.is_finite() {
                return Err(parse_err(line, format!("non-finite feature {field:?}")));
            }
            data.push(x);
        }
    }
    let features = Matrix::from_vec(labels.len(), dim, data)?;
    FeatureDataset::new(features, labels, Provenance::Ingested(path.to_path_buf()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Per-coordinate standard deviation around the class centroid.
    pub intra_spread: f64,
    /// Per-coordinate standard deviation of the class centroids.
    pub inter_spread: f64,
    /// Share of each class placed halfway toward a random foreign centroid.
    pub hard_fraction: f64,
    /// Width of the subspace that carries class structure; `None` uses all of `dim`.
    #[serde(default)]
    pub signal_dim: Option<usize>,
    /// Isotropic noise added across all `dim` coordinates.
    #[serde(default)]
    pub nuisance_spread: f64,
}

impl SyntheticSpec {
    /// The default desk-scale benchmark: 40 classes × 30 samples in 64 dimensions.
    pub fn synth_hard() -> Self {
        Self {
            num_classes: 40,
            per_class: 30,
            dim: 64,
            intra_spread: 0.5,
            inter_spread: 1.0,
            hard_fraction: 0.2,
            signal_dim: Some(16),
            nuisance_spread: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Dimension {
                context: "synthetic dim (minimum)",
                expected: 2,
                actual: self.dim,
            });
        }
        if self.num_classes == 0 || self.per_class == 0 {
            return Err(Error::OutOfRange(
                "class and sample counts must be >= 1".into(),
            ));
        }
        if !(self.intra_spread > 0.0 && self.inter_spread > 0.0) {
            return Err(Error::OutOfRange("spreads must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.hard_fraction) {
            return Err(Error::OutOfRange(format!(
                "hard_fraction {} outside [0, 1)",
                self.hard_fraction
            )));
        }
        if let Some(s) = self.signal_dim {
            if s == 0 || s > self.dim {
                return Err(Error::OutOfRange(format!(
                    "signal_dim {s} outside 1..={}",
                    self.dim
                )));
            }
        }
        if !(self.nuisance_spread >= 0.0) {
            return Err(Error::OutOfRange("nuisance_spread must be >= 0".into()));
        }
        Ok(())
    }

    fn hard_count(&self) -> usize {
        (self.hard_fraction * self.per_class as f64).round() as usize
    }
}

/// Class-clustered Gaussian features. Labels are `0..num_classes`, grouped.
pub fn generate_synthetic(spec: &SyntheticSpec, rng: &mut Rng) -> Result<FeatureDataset> {
    spec.validate()?;
    let s = spec.signal_dim.unwrap_or(spec.dim);
    let basis = if s == spec.dim {
        None
    } else {
        let g = Matrix::from_fn(spec.dim, s, |_, _| rng.normal());
        Some(svd(&g).u)
    };
    let centroids = Matrix::from_fn(spec.num_classes, s, |_, _| spec.inter_spread * rng.normal());
    let hard = spec.hard_count();
    let n = spec.num_classes * spec.per_class;
    let mut features = Matrix::zeros(n, spec.dim);
    let mut labels = Vec::with_capacity(n);
    let mut latent = vec![0.0; s];
    for c in 0..spec.num_classes {
        let hard_members: BTreeSet<usize> = rng
            .sample_indices(spec.per_class, hard)
            .into_iter()
            .collect();
        for k in 0..spec.per_class {
            let row = c * spec.per_class + k;
            let other = (spec.num_classes > 1 && hard_members.contains(&k)).then(|| {
                let o = rng.below(spec.num_classes - 1);
                if o >= c {
                    o + 1
                } else {
                    o
                }
            });
            for (j, l) in latent.iter_mut().enumerate() {
                let centre = match other {
                    Some(o) => 0.5 * (centroids[(c, j)] + centroids[(o, j)]),
                    None => centroids[(c, j)],
                };
                *l = centre + spec.intra_spread * rng.normal();
            }
            let out = features.row_mut(row);
            match &basis {
                None => out.copy_from_slice(&latent),
                Some(b) => {
                    for (i, o) in out.iter_mut().enumerate() {
                        *o = b.row(i).iter().zip(&latent).map(|(x, y)| x * y).sum();
                    }
                }
            }
            if spec.nuisance_spread > 0.0 {
                for o in out.iter_mut() {
                    *o += spec.nuisance_spread * rng.normal();
                }
            }
            labels.push(c);
        }
    }
    FeatureDataset::new(features, labels, Provenance::Synthetic)
}

/// Relabels exactly `round(ratio·n)` samples, each to a uniformly drawn
/// different class from the registry.
pub fn inject_symmetric_noise(
    ds: &FeatureDataset,
    ratio: f64,
    rng: &mut Rng,
) -> Result<FeatureDataset> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::OutOfRange(format!(
            "noise ratio {ratio} outside [0, 1)"
        )));
    }
    let count = (ratio * ds.len() as f64).round() as usize;
    if count == 0 {
        return Ok(ds.clone());
    }
    if ds.classes.len() < 2 {
        return Err(Error::CannotCorrupt);
    }
    let mut out = ds.clone();
    let mut picked = rng.sample_indices(ds.len(), count);
    picked.sort_unstable();
    for i in picked {
        let original = out.labels[i];
        let pos = ds
            .classes
            .binary_search(&original)
            .expect("label in registry");
        let mut k = rng.below(ds.classes.len() - 1);
        if k >= pos {
            k += 1;
        }
        let corrupted = ds.classes[k];
        out.labels[i] = corrupted;
        out.noise.retain(|e| e.index != i);
        out.noise.push(NoiseEntry {
            index: i,
            original,
            corrupted,
        });
    }
    out.noise.sort_by_key(|e| e.index);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSize {
    Fraction(f64),
    Count(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_classes: SplitSize,
    /// Shuffle classes before assigning; `None` puts the lowest ids in train.
    pub seed: Option<u64>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_classes: SplitSize::Fraction(0.5),
            seed: None,
        }
    }
}

/// Partitions classes (and with them samples) into train and test sides.
pub fn class_disjoint_split(
    ds: &FeatureDataset,
    spec: &SplitSpec,
) -> Result<(FeatureDataset, FeatureDataset)> {
    let total = ds.classes.len();
    if total < 2 {
        return Err(Error::InvalidSplit(format!(
            "{total} class(es); need at least 2"
        )));
    }
    let k = match spec.train_classes {
        SplitSize::Fraction(f) => {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::InvalidSplit(format!("fraction {f} outside [0, 1]")));
            }
            (f * total as f64).round() as usize
        }
        SplitSize::Count(c) => c,
    };
    if k == 0 || k >= total {
        return Err(Error::InvalidSplit(format!(
            "{k} of {total} classes for training leaves one side empty"
        )));
    }
    let mut classes = ds.classes.clone();
    if let Some(seed) = spec.seed {
        Rng::new(seed).shuffle(&mut classes);
    }
    let train_set: BTreeSet<usize> = classes[..k].iter().copied().collect();
    let (train_idx, test_idx): (Vec<usize>, Vec<usize>) =
        (0..ds.len()).partition(|&i| train_set.contains(&ds.labels[i]));
    Ok((ds.subset(&train_idx), ds.subset(&test_idx)))
}
