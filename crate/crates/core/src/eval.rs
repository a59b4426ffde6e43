//! Retrieval metrics and embedding-space diagnostics.
//!
//! Retrieval is leave-one-out: every row is a query against all other rows,
//! ranked by cosine similarity with ties broken by ascending index.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::numerics::{dot, normalize_rows, svd_singular_values, Matrix};
use crate::{Error, Result};

fn check_inputs(embeddings: &Matrix, labels: &[usize]) -> Result<Matrix> {
    if embeddings.rows() < 2 {
        return Err(Error::OutOfRange(format!(
            "need at least 2 embeddings, got {}",
            embeddings.rows()
        )));
    }
    if labels.len() != embeddings.rows() {
        return Err(Error::Dimension {
            context: "evaluation labels",
            expected: embeddings.rows(),
            actual: labels.len(),
        });
    }
    Ok(normalize_rows(embeddings)?.0)
}

/// Gallery order for every query: all other rows by decreasing cosine.
pub fn rank_all(unit: &Matrix) -> Vec<Vec<usize>> {
    let n = unit.rows();
    let sims = unit.matmul_t(unit).expect("square product");
    (0..n)
        .map(|q| {
            let mut order: Vec<usize> = (0..n).filter(|&j| j != q).collect();
            order.sort_by(|&a, &b| sims[(q, b)].total_cmp(&sims[(q, a)]).then(a.cmp(&b)));
            order
        })
        .collect()
}

fn clamp_k(k: usize, gallery: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::OutOfRange("K must be >= 1".into()));
    }
    if k > gallery {
        log::warn!("Recall@{k} exceeds gallery size {gallery}; clamping");
        return Ok(gallery);
    }
    Ok(k)
}

fn recall_from_ranking(ranking: &[Vec<usize>], labels: &[usize], k: usize) -> f64 {
    let hits = ranking
        .iter()
        .enumerate()
        .filter(|(q, order)| order[..k].iter().any(|&j| labels[j] == labels[*q]))
        .count();
    hits as f64 / ranking.len() as f64
}

fn map_from_ranking(ranking: &[Vec<usize>], labels: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    let mut queries = 0usize;
    for (q, order) in ranking.iter().enumerate() {
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        for (rank, &j) in order.iter().enumerate() {
            if labels[j] == labels[q] {
                hits += 1;
                precision_sum += hits as f64 / (rank + 1) as f64;
            }
        }
        if hits > 0 {
            total += precision_sum / hits as f64;
            queries += 1;
        }
    }
    if queries == 0 {
        return Err(Error::Unsatisfiable(
            "no query has a positive in the gallery".into(),
        ));
    }
    Ok(total / queries as f64)
}

/// Fraction of queries with at least one same-label item among the `k` nearest.
/// `k` above the gallery size is clamped with a warning.
pub fn recall_at_k(embeddings: &Matrix, labels: &[usize], k: usize) -> Result<f64> {
    let unit = check_inputs(embeddings, labels)?;
    let k = clamp_k(k, unit.rows() - 1)?;
    Ok(recall_from_ranking(&rank_all(&unit), labels, k))
}

/// Mean over queries of average precision over all positives. Queries without
/// any positive are skipped.
pub fn mean_average_precision(embeddings: &Matrix, labels: &[usize]) -> Result<f64> {
    let unit = check_inputs(embeddings, labels)?;
    map_from_ranking(&rank_all(&unit), labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub map_score: f64,
}

impl RetrievalReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at.get(&k).copied()
    }
}

/// Recall at each requested `K` and mAP from a single ranking pass.
pub fn retrieval_report(
    embeddings: &Matrix,
    labels: &[usize],
    ks: &[usize],
) -> Result<RetrievalReport> {
    let unit = check_inputs(embeddings, labels)?;
    let ranking = rank_all(&unit);
    let mut recall_at = BTreeMap::new();
    for &k in ks {
        let kk = clamp_k(k, unit.rows() - 1)?;
        recall_at.insert(k, recall_from_ranking(&ranking, labels, kk));
    }
    Ok(RetrievalReport {
        recall_at,
        map_score: map_from_ranking(&ranking, labels)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub pi_intra: f64,
    pub pi_inter: f64,
    pub pi_ratio: f64,
    /// Mean unit embedding per class, classes ascending.
    pub class_means: Vec<(usize, Vec<f64>)>,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Average within-class pairwise distance over the mean distance between
/// class means, all on unit-normalized embeddings.
pub fn embedding_density(embeddings: &Matrix, labels: &[usize]) -> Result<DensityReport> {
    let unit = check_inputs(embeddings, labels)?;
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::UndefinedInter);
    }
    let d = unit.cols();
    let class_means: Vec<(usize, Vec<f64>)> = by_class
        .iter()
        .map(|(&y, idx)| {
            let mut mu = vec![0.0; d];
            for &i in idx {
                for (m, x) in mu.iter_mut().zip(unit.row(i)) {
                    *m += x;
                }
            }
            mu.iter_mut().for_each(|m| *m /= idx.len() as f64);
            (y, mu)
        })
        .collect();

    let mut inter = 0.0;
    let mut inter_pairs = 0usize;
    for a in 0..class_means.len() {
        for b in (a + 1)..class_means.len() {
            inter += euclidean(&class_means[a].1, &class_means[b].1);
            inter_pairs += 1;
        }
    }
    let pi_inter = inter / inter_pairs as f64;

    let mut intra = 0.0;
    let mut intra_pairs = 0usize;
    for idx in by_class.values() {
        for (k, &i) in idx.iter().enumerate() {
            for &j in &idx[k + 1..] {
                intra += euclidean(unit.row(i), unit.row(j));
                intra_pairs += 1;
            }
        }
    }
    if intra_pairs == 0 {
        return Err(Error::Unsatisfiable("no class has two samples".into()));
    }
    let pi_intra = intra / intra_pairs as f64;
    if !(pi_inter > 0.0) {
        return Err(Error::UndefinedInter);
    }
    Ok(DensityReport {
        pi_intra,
        pi_inter,
        pi_ratio: pi_intra / pi_inter,
        class_means,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    /// Singular values of the unit-row data, normalized to sum to 1, descending.
    pub distribution: Vec<f64>,
    /// KL divergence of `distribution` from uniform; 0 for a flat spectrum,
    /// `ln(min(n, d))` for rank one.
    pub score: f64,
}

pub fn spectral_decay(embeddings: &Matrix) -> Result<SpectralReport> {
    if embeddings.rows() < 2 {
        return Err(Error::OutOfRange(
            "spectral decay needs at least 2 samples".into(),
        ));
    }
    let (unit, _) = normalize_rows(embeddings)?;
    let sv = svd_singular_values(&unit);
    let total: f64 = sv.iter().sum();
    let distribution: Vec<f64> = sv.iter().map(|s| s / total).collect();
    let m = distribution.len() as f64;
    let score = distribution
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * (p * m).ln())
        .sum::<f64>()
        .max(0.0);
    Ok(SpectralReport {
        distribution,
        score,
    })
}

/// Mean cosine between each row and its nearest other row, a cheap collapse probe.
pub fn mean_nearest_cosine(embeddings: &Matrix) -> Result<f64> {
    let (unit, _) = normalize_rows(embeddings)?;
    let n = unit.rows();
    if n < 2 {
        return Err(Error::OutOfRange("need at least 2 embeddings".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        total += (0..n)
            .filter(|&j| j != i)
            .map(|j| dot(unit.row(i), unit.row(j)))
            .fold(f64::NEG_INFINITY, f64::max);
    }
    Ok(total / n as f64)
}
