//! Baseline metric-learning objectives.
//!
//! Every loss works on unit embeddings `z_i = v_i/‖v_i‖` and reports its
//! gradient with respect to the raw embeddings `v_i`, so the result can be fed
//! straight into [`MlpEncoder::backward`](crate::encoder::MlpEncoder::backward).
//! Hinge kinks take the inactive (zero) branch.

use serde::{Deserialize, Serialize};

use crate::numerics::{dot, normalize, normalize_rows, squared_distance, Matrix, Rng, MIN_NORM};
use crate::samplers::MinedTriplets;
use crate::{Error, Result};

/// One mini-batch of embeddings with labels.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    raw: Matrix,
    unit: Matrix,
    norms: Vec<f64>,
    labels: Vec<usize>,
}

impl EmbeddingBatch {
    pub fn new(raw: Matrix, labels: Vec<usize>) -> Result<Self> {
        if raw.rows() < 2 {
            return Err(Error::OutOfRange(format!(
                "batch needs at least 2 rows, got {}",
                raw.rows()
            )));
        }
        if labels.len() != raw.rows() {
            return Err(Error::Dimension {
                context: "batch labels",
                expected: raw.rows(),
                actual: labels.len(),
            });
        }
        let (unit, norms) = normalize_rows(&raw)?;
        Ok(Self {
            raw,
            unit,
            norms,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.raw.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.raw.cols()
    }

    pub fn raw(&self) -> &Matrix {
        &self.raw
    }

    pub fn unit(&self) -> &Matrix {
        &self.unit
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    #[inline]
    pub fn is_positive(&self, i: usize, j: usize) -> bool {
        i != j && self.labels[i] == self.labels[j]
    }

    #[inline]
    pub fn is_negative(&self, i: usize, j: usize) -> bool {
        self.labels[i] != self.labels[j]
    }

    /// Euclidean distance between unit embeddings.
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        squared_distance(self.unit.row(i), self.unit.row(j)).sqrt()
    }

    pub fn distance_matrix(&self) -> Matrix {
        let n = self.len();
        let mut d = Matrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let v = self.distance(i, j);
                d[(i, j)] = v;
                d[(j, i)] = v;
            }
        }
        d
    }

    /// Pulls a gradient w.r.t. unit rows back through `z = v/‖v‖`:
    /// `∂L/∂v = (I − z zᵀ) ∂L/∂z / ‖v‖`.
    pub fn chain_to_raw(&self, grad_unit: &Matrix) -> Matrix {
        let mut out = grad_unit.clone();
        for i in 0..self.len() {
            let z = self.unit.row(i);
            let radial = dot(grad_unit.row(i), z);
            let inv = 1.0 / self.norms[i];
            for (o, &zk) in out.row_mut(i).iter_mut().zip(z) {
                *o = (*o - radial * zk) * inv;
            }
        }
        out
    }

    fn has_positive_and_negative_pair(&self) -> bool {
        let n = self.len();
        let mut pos = false;
        let mut neg = false;
        for i in 0..n {
            for j in (i + 1)..n {
                if self.labels[i] == self.labels[j] {
                    pos = true;
                } else {
                    neg = true;
                }
            }
        }
        pos && neg
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    /// `∂L/∂v_i`, one row per batch row.
    pub grad_raw: Matrix,
}

// d‖z_i − z_j‖ / dz_i, or zero at coincident points.
fn add_distance_grad(g: &mut Matrix, unit: &Matrix, i: usize, j: usize, d: f64, coeff: f64) {
    if d <= MIN_NORM || coeff == 0.0 {
        return;
    }
    let s = coeff / d;
    for k in 0..unit.cols() {
        let diff = unit[(i, k)] - unit[(j, k)];
        g[(i, k)] += s * diff;
        g[(j, k)] -= s * diff;
    }
}

/// Mean over all unordered pairs of `d²` (positives) and `max(0, m − d)²` (negatives).
pub fn contrastive_loss(batch: &EmbeddingBatch, margin: f64) -> Result<LossOutput> {
    if !(margin > 0.0) {
        return Err(Error::OutOfRange(format!(
            "contrastive margin {margin} must be > 0"
        )));
    }
    let n = batch.len();
    let unit = batch.unit();
    let mut g = Matrix::zeros(n, batch.dim());
    let mut total = 0.0;
    let (mut n_pos, mut n_neg) = (0usize, 0usize);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = batch.distance(i, j);
            if batch.is_positive(i, j) {
                n_pos += 1;
                total += d * d;
                add_distance_grad(&mut g, unit, i, j, d, 2.0 * d);
            } else {
                n_neg += 1;
                let gap = margin - d;
                if gap > 0.0 {
                    total += gap * gap;
                    add_distance_grad(&mut g, unit, i, j, d, -2.0 * gap);
                }
            }
        }
    }
    if n_pos == 0 && n_neg == 0 {
        return Err(Error::EmptyMining("contrastive loss found no pairs"));
    }
    let count = (n_pos + n_neg) as f64;
    g.scale(1.0 / count);
    Ok(LossOutput {
        value: total / count,
        grad_raw: batch.chain_to_raw(&g),
    })
}

/// Mean of `max(0, d(a,p) − d(a,n) + margin)` over the mined triplets.
pub fn triplet_loss(
    batch: &EmbeddingBatch,
    margin: f64,
    triplets: &MinedTriplets,
) -> Result<LossOutput> {
    if triplets.is_empty() {
        return Err(Error::EmptyMining(
            "triplet loss needs at least one triplet",
        ));
    }
    let unit = batch.unit();
    let mut g = Matrix::zeros(batch.len(), batch.dim());
    let mut total = 0.0;
    for t in triplets.iter() {
        let d_ap = batch.distance(t.anchor, t.positive);
        let d_an = batch.distance(t.anchor, t.negative);
        let h = d_ap - d_an + margin;
        if h > 0.0 {
            total += h;
            add_distance_grad(&mut g, unit, t.anchor, t.positive, d_ap, 1.0);
            add_distance_grad(&mut g, unit, t.anchor, t.negative, d_an, -1.0);
        }
    }
    let count = triplets.len() as f64;
    g.scale(1.0 / count);
    Ok(LossOutput {
        value: total / count,
        grad_raw: batch.chain_to_raw(&g),
    })
}

/// `max(0, margin + y'·(d − β))` with `y' = +1` for positives and `−1` for negatives.
pub fn margin_pair_term(d: f64, positive: bool, margin: f64, beta: f64) -> f64 {
    let sign = if positive { 1.0 } else { -1.0 };
    (margin + sign * (d - beta)).max(0.0)
}

/// Margin loss with fixed boundary `β`. Each mined triplet contributes its
/// anchor-positive and anchor-negative pair; the value is the mean over pairs.
pub fn margin_loss(
    batch: &EmbeddingBatch,
    margin: f64,
    beta: f64,
    triplets: &MinedTriplets,
) -> Result<LossOutput> {
    if !(beta > 0.0) {
        return Err(Error::OutOfRange(format!(
            "margin-loss beta {beta} must be > 0"
        )));
    }
    if triplets.is_empty() {
        return Err(Error::EmptyMining("margin loss needs at least one triplet"));
    }
    let unit = batch.unit();
    let mut g = Matrix::zeros(batch.len(), batch.dim());
    let mut total = 0.0;
    for t in triplets.iter() {
        for (other, positive) in [(t.positive, true), (t.negative, false)] {
            let d = batch.distance(t.anchor, other);
            let term = margin_pair_term(d, positive, margin, beta);
            if term > 0.0 {
                total += term;
                let sign = if positive { 1.0 } else { -1.0 };
                add_distance_grad(&mut g, unit, t.anchor, other, d, sign);
            }
        }
    }
    let count = 2.0 * triplets.len() as f64;
    g.scale(1.0 / count);
    Ok(LossOutput {
        value: total / count,
        grad_raw: batch.chain_to_raw(&g),
    })
}

/// Multi-similarity loss over cosine similarities, averaged over anchors:
/// `(1/α)·ln(1 + Σ_P e^{−α(s−base)}) + (1/β)·ln(1 + Σ_N e^{β(s−base)})`.
pub fn multisimilarity_loss(
    batch: &EmbeddingBatch,
    alpha: f64,
    beta: f64,
    base: f64,
) -> Result<LossOutput> {
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::OutOfRange(format!(
            "multi-similarity alpha {alpha} and beta {beta} must be > 0"
        )));
    }
    if !batch.has_positive_and_negative_pair() {
        return Err(Error::EmptyMining(
            "multi-similarity loss needs a positive and a negative pair",
        ));
    }
    let n = batch.len();
    let unit = batch.unit();
    let sim = unit.matmul_t(unit)?;
    // coefficient of ∂L/∂s_ij, accumulated per ordered pair
    let mut coeff = Matrix::zeros(n, n);
    let mut total = 0.0;
    for i in 0..n {
        let mut pos_sum = 0.0;
        let mut neg_sum = 0.0;
        for j in 0..n {
            if batch.is_positive(i, j) {
                pos_sum += (-alpha * (sim[(i, j)] - base)).exp();
            } else if batch.is_negative(i, j) {
                neg_sum += (beta * (sim[(i, j)] - base)).exp();
            }
        }
        total += (1.0 + pos_sum).ln() / alpha + (1.0 + neg_sum).ln() / beta;
        for j in 0..n {
            if batch.is_positive(i, j) {
                coeff[(i, j)] = -(-alpha * (sim[(i, j)] - base)).exp() / (1.0 + pos_sum);
            } else if batch.is_negative(i, j) {
                coeff[(i, j)] = (beta * (sim[(i, j)] - base)).exp() / (1.0 + neg_sum);
            }
        }
    }
    let mut g = Matrix::zeros(n, batch.dim());
    for i in 0..n {
        for j in 0..n {
            let c = coeff[(i, j)];
            if c == 0.0 {
                continue;
            }
            for k in 0..batch.dim() {
                g[(i, k)] += c * unit[(j, k)];
                g[(j, k)] += c * unit[(i, k)];
            }
        }
    }
    g.scale(1.0 / n as f64);
    Ok(LossOutput {
        value: total / n as f64,
        grad_raw: batch.chain_to_raw(&g),
    })
}

/// One learnable unit vector per training class.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyBank {
    classes: Vec<usize>,
    proxies: Matrix,
}

impl ProxyBank {
    /// Random unit proxies for the given classes.
    pub fn random(classes: &[usize], dim: usize, rng: &mut Rng) -> Result<Self> {
        let mut classes = classes.to_vec();
        classes.sort_unstable();
        classes.dedup();
        let raw = Matrix::from_fn(classes.len(), dim, |_, _| rng.normal());
        let (proxies, _) = normalize_rows(&raw)?;
        Ok(Self { classes, proxies })
    }

    /// Proxies from explicit vectors (normalized on the way in).
    pub fn from_rows(classes: Vec<usize>, rows: &Matrix) -> Result<Self> {
        if classes.len() != rows.rows() {
            return Err(Error::Dimension {
                context: "proxy classes",
                expected: rows.rows(),
                actual: classes.len(),
            });
        }
        let mut order: Vec<usize> = (0..classes.len()).collect();
        order.sort_by_key(|&i| classes[i]);
        let sorted: Vec<usize> = order.iter().map(|&i| classes[i]).collect();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::OutOfRange("duplicate proxy class".into()));
        }
        let (proxies, _) = normalize_rows(&rows.select_rows(&order))?;
        Ok(Self {
            classes: sorted,
            proxies,
        })
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn proxies(&self) -> &Matrix {
        &self.proxies
    }

    pub fn index_of(&self, class: usize) -> Result<usize> {
        self.classes
            .binary_search(&class)
            .map_err(|_| Error::UnknownClass(class))
    }

    /// Gradient step followed by renormalization of every proxy.
    pub fn apply_gradient(&mut self, grad: &Matrix, lr: f64) -> Result<()> {
        if grad.shape() != self.proxies.shape() {
            return Err(Error::Dimension {
                context: "proxy gradient",
                expected: self.proxies.as_slice().len(),
                actual: grad.as_slice().len(),
            });
        }
        if !grad.is_finite() {
            return Err(Error::Divergence("non-finite proxy gradient".into()));
        }
        let mut next = self.proxies.clone();
        next.add_scaled(grad, -lr)?;
        for i in 0..next.rows() {
            let z = normalize(next.row(i))?;
            next.row_mut(i).copy_from_slice(&z);
        }
        self.proxies = next;
        Ok(())
    }
}

/// ProxyNCA: mean over samples of `−ln softmax_c(−‖z_i − p_c‖²)[y_i]`,
/// softmax over every proxy. Also returns `∂L/∂p_c`.
pub fn proxynca_loss(batch: &EmbeddingBatch, proxies: &ProxyBank) -> Result<(LossOutput, Matrix)> {
    let n = batch.len();
    let dim = batch.dim();
    let p = proxies.proxies();
    if p.cols() != dim {
        return Err(Error::Dimension {
            context: "proxy dimension",
            expected: dim,
            actual: p.cols(),
        });
    }
    let targets = batch
        .labels()
        .iter()
        .map(|&y| proxies.index_of(y))
        .collect::<Result<Vec<_>>>()?;
    let unit = batch.unit();
    let mut g = Matrix::zeros(n, dim);
    let mut gp = Matrix::zeros(p.rows(), dim);
    let mut total = 0.0;
    let mut logits = vec![0.0; p.rows()];
    for i in 0..n {
        let z = unit.row(i);
        for (c, l) in logits.iter_mut().enumerate() {
            *l = -squared_distance(z, p.row(c));
        }
        let log_q = crate::numerics::log_softmax_row(&logits, 1.0)?;
        total -= log_q[targets[i]];
        for c in 0..p.rows() {
            // ∂loss/∂logit_c = q_c − 1[c = y]
            let dl = log_q[c].exp() - if c == targets[i] { 1.0 } else { 0.0 };
            for k in 0..dim {
                let diff = z[k] - p[(c, k)];
                g[(i, k)] -= 2.0 * dl * diff;
                gp[(c, k)] += 2.0 * dl * diff;
            }
        }
    }
    let inv = 1.0 / n as f64;
    g.scale(inv);
    gp.scale(inv);
    Ok((
        LossOutput {
            value: total * inv,
            grad_raw: batch.chain_to_raw(&g),
        },
        gp,
    ))
}

/// Loss selection behind one interface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    Contrastive { margin: f64 },
    Triplet { margin: f64 },
    Margin { margin: f64, beta: f64 },
    MultiSimilarity { alpha: f64, beta: f64, base: f64 },
    ProxyNca,
}

impl LossKind {
    pub const TRIPLET_DEFAULT: LossKind = LossKind::Triplet { margin: 0.2 };
    pub const MARGIN_DEFAULT: LossKind = LossKind::Margin {
        margin: 0.2,
        beta: 1.2,
    };
    pub const MULTISIMILARITY_DEFAULT: LossKind = LossKind::MultiSimilarity {
        alpha: 2.0,
        beta: 50.0,
        base: 0.5,
    };

    pub fn needs_triplets(&self) -> bool {
        matches!(self, LossKind::Triplet { .. } | LossKind::Margin { .. })
    }

    pub fn needs_proxies(&self) -> bool {
        matches!(self, LossKind::ProxyNca)
    }

    /// Evaluates the loss. Returns the proxy gradient for ProxyNCA.
    pub fn evaluate(
        &self,
        batch: &EmbeddingBatch,
        triplets: Option<&MinedTriplets>,
        proxies: Option<&ProxyBank>,
    ) -> Result<(LossOutput, Option<Matrix>)> {
        let need_triplets = || triplets.ok_or(Error::EmptyMining("loss requires mined triplets"));
        match *self {
            LossKind::Contrastive { margin } => Ok((contrastive_loss(batch, margin)?, None)),
            LossKind::Triplet { margin } => {
                Ok((triplet_loss(batch, margin, need_triplets()?)?, None))
            }
            LossKind::Margin { margin, beta } => {
                Ok((margin_loss(batch, margin, beta, need_triplets()?)?, None))
            }
            LossKind::MultiSimilarity { alpha, beta, base } => {
                Ok((multisimilarity_loss(batch, alpha, beta, base)?, None))
            }
            LossKind::ProxyNca => {
                let bank =
                    proxies.ok_or(Error::OutOfRange("ProxyNCA needs a proxy bank".into()))?;
                let (out, gp) = proxynca_loss(batch, bank)?;
                Ok((out, Some(gp)))
            }
        }
    }
}
