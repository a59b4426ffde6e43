//! Listwise self-distillation regularizer.
//!
//! Each anchor's similarities to the whole batch (itself included) are turned
//! into a temperature softmax. The student's rows are pulled toward the rows a
//! frozen teacher produces on the same batch, through a cross-entropy weighted
//! by the epoch schedule `α_t = t/T`.

use serde::{Deserialize, Serialize};

use crate::losses::{EmbeddingBatch, LossOutput};
use crate::numerics::{dot, log_softmax_row, squared_distance, Matrix};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    #[default]
    Dot,
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LsdConfig {
    pub tau: f64,
    pub lambda: f64,
    pub total_epochs: usize,
    #[serde(default)]
    pub metric_kind: MetricKind,
}

impl LsdConfig {
    pub fn new(
        tau: f64,
        lambda: f64,
        total_epochs: usize,
        metric_kind: MetricKind,
    ) -> Result<Self> {
        let cfg = Self {
            tau,
            lambda,
            total_epochs,
            metric_kind,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidTemperature(self.tau));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::OutOfRange(format!(
                "lambda {} must be >= 0",
                self.lambda
            )));
        }
        if self.total_epochs == 0 {
            return Err(Error::OutOfRange("total_epochs must be >= 1".into()));
        }
        Ok(())
    }

    /// The `τ²λ` factor applied to the regularizer in the training objective.
    pub fn objective_weight(&self) -> f64 {
        self.tau * self.tau * self.lambda
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilaritySource {
    Student,
    Teacher,
}

#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub s: Matrix,
    pub source: SimilaritySource,
}

/// Pairwise similarities over unit rows, diagonal included.
pub fn similarity_matrix(
    batch: &EmbeddingBatch,
    metric_kind: MetricKind,
    source: SimilaritySource,
) -> SimilarityMatrix {
    let z = batch.unit();
    let n = batch.len();
    let mut s = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = match metric_kind {
                MetricKind::Dot => dot(z.row(i), z.row(j)),
                MetricKind::Euclidean => 1.0 - 0.5 * squared_distance(z.row(i), z.row(j)),
            };
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    SimilarityMatrix { s, source }
}

/// Row-stochastic matrix over the batch, with the matching log-probabilities.
#[derive(Debug, Clone)]
pub struct ListwiseDistribution {
    p: Matrix,
    log_p: Matrix,
}

impl ListwiseDistribution {
    /// Wraps explicit rows; each must be nonnegative and sum to 1 within 1e-9.
    pub fn from_rows(p: Matrix) -> Result<Self> {
        if p.rows() != p.cols() {
            return Err(Error::Dimension {
                context: "listwise distribution",
                expected: p.rows(),
                actual: p.cols(),
            });
        }
        for (i, row) in p.iter_rows().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::OutOfRange(format!("row {i} is not a distribution")));
            }
        }
        let log_p = Matrix::from_fn(p.rows(), p.cols(), |i, j| p[(i, j)].ln());
        Ok(Self { p, log_p })
    }

    /// `1[y_i = y_j] / |P*(i)|` rows, where `P*(i)` holds the anchor and its positives.
    pub fn hard_targets(labels: &[usize]) -> Self {
        let n = labels.len();
        let p = Matrix::from_fn(n, n, |i, j| {
            if labels[i] == labels[j] {
                1.0 / labels.iter().filter(|&&y| y == labels[i]).count() as f64
            } else {
                0.0
            }
        });
        let log_p = Matrix::from_fn(n, n, |i, j| p[(i, j)].ln());
        Self { p, log_p }
    }

    pub fn p(&self) -> &Matrix {
        &self.p
    }

    pub fn log_p(&self) -> &Matrix {
        &self.log_p
    }

    pub fn len(&self) -> usize {
        self.p.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.p.rows() == 0
    }
}

pub fn listwise_distribution(s: &SimilarityMatrix, tau: f64) -> Result<ListwiseDistribution> {
    let n = s.s.rows();
    let mut log_p = Matrix::zeros(n, n);
    for i in 0..n {
        log_p
            .row_mut(i)
            .copy_from_slice(&log_softmax_row(s.s.row(i), tau)?);
    }
    let p = Matrix::from_fn(n, n, |i, j| log_p[(i, j)].exp());
    Ok(ListwiseDistribution { p, log_p })
}

/// `α_t = t/T` for `1 ≤ t ≤ T`.
pub fn alpha_schedule(t: usize, total: usize) -> Result<f64> {
    if t == 0 || t > total {
        return Err(Error::OutOfRange(format!("epoch {t} outside 1..={total}")));
    }
    Ok(t as f64 / total as f64)
}

// The schedule extended to t = 0, where it vanishes.
fn schedule_weight(t: usize, total: usize) -> Result<f64> {
    if t == 0 {
        return if total == 0 {
            Err(Error::OutOfRange("total_epochs must be >= 1".into()))
        } else {
            Ok(0.0)
        };
    }
    alpha_schedule(t, total)
}

fn check_same_shape(student: &ListwiseDistribution, teacher: &ListwiseDistribution) -> Result<()> {
    if student.len() != teacher.len() {
        return Err(Error::Dimension {
            context: "teacher distribution",
            expected: student.len(),
            actual: teacher.len(),
        });
    }
    Ok(())
}

/// `−(α_t/|B|²) Σ_i Σ_j S_ij ln P_ij`. Epoch `t = 0` is accepted and yields 0.
pub fn lsd_value(
    student: &ListwiseDistribution,
    teacher: &ListwiseDistribution,
    t: usize,
    total: usize,
) -> Result<f64> {
    check_same_shape(student, teacher)?;
    let alpha = schedule_weight(t, total)?;
    if alpha == 0.0 {
        return Ok(0.0);
    }
    let n = student.len() as f64;
    let ce: f64 = teacher
        .p
        .as_slice()
        .iter()
        .zip(student.log_p.as_slice())
        .filter(|(&s, _)| s > 0.0)
        .map(|(&s, &lp)| -s * lp)
        .sum();
    Ok(alpha * ce / (n * n))
}

/// `∂R/∂s_ij = α(P_ij − S_ij)/(τ|B|²)`.
fn similarity_gradient(
    student: &ListwiseDistribution,
    targets: &ListwiseDistribution,
    alpha: f64,
    tau: f64,
) -> Matrix {
    let n = student.len();
    let scale = alpha / (tau * (n * n) as f64);
    Matrix::from_fn(n, n, |i, j| scale * (student.p[(i, j)] - targets.p[(i, j)]))
}

/// Value and raw-embedding gradient of the regularizer against fixed target rows.
pub fn lsd_term(
    batch: &EmbeddingBatch,
    targets: &ListwiseDistribution,
    cfg: &LsdConfig,
    t: usize,
) -> Result<LossOutput> {
    cfg.validate()?;
    let n = batch.len();
    if targets.len() != n {
        return Err(Error::Dimension {
            context: "target distribution",
            expected: n,
            actual: targets.len(),
        });
    }
    let alpha = schedule_weight(t, cfg.total_epochs)?;
    if alpha == 0.0 {
        return Ok(LossOutput {
            value: 0.0,
            grad_raw: Matrix::zeros(n, batch.dim()),
        });
    }
    let sims = similarity_matrix(batch, cfg.metric_kind, SimilaritySource::Student);
    let student = listwise_distribution(&sims, cfg.tau)?;
    let value = lsd_value(&student, targets, t, cfg.total_epochs)?;
    let c = similarity_gradient(&student, targets, alpha, cfg.tau);
    // Both branches share the tangential derivative on the sphere, so the
    // dot form is used for either metric; the radial part is projected out.
    let sym = Matrix::from_fn(n, n, |i, j| c[(i, j)] + c[(j, i)]);
    let grad_unit = sym.matmul(batch.unit())?;
    Ok(LossOutput {
        value,
        grad_raw: batch.chain_to_raw(&grad_unit),
    })
}

/// Teacher rows for a batch embedded by the frozen teacher.
pub fn teacher_distribution(
    teacher_batch: &EmbeddingBatch,
    cfg: &LsdConfig,
) -> Result<ListwiseDistribution> {
    let sims = similarity_matrix(teacher_batch, cfg.metric_kind, SimilaritySource::Teacher);
    listwise_distribution(&sims, cfg.tau)
}

/// `∂R/∂v_i` for every row of the student batch.
pub fn lsd_gradient(
    batch: &EmbeddingBatch,
    teacher_batch: &EmbeddingBatch,
    cfg: &LsdConfig,
    t: usize,
) -> Result<Matrix> {
    if teacher_batch.len() != batch.len() {
        return Err(Error::Dimension {
            context: "teacher batch",
            expected: batch.len(),
            actual: teacher_batch.len(),
        });
    }
    let teacher = teacher_distribution(teacher_batch, cfg)?;
    Ok(lsd_term(batch, &teacher, cfg, t)?.grad_raw)
}

/// Anchor-centred index sets used by the per-anchor gradient form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LsdGradientContext {
    pub anchor: usize,
    /// Same-label samples other than the anchor.
    pub positives: Vec<usize>,
    /// `positives` plus the anchor itself, ascending.
    pub positives_with_self: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl LsdGradientContext {
    pub fn new(labels: &[usize], anchor: usize) -> Self {
        let n = labels.len();
        let y = labels[anchor];
        Self {
            anchor,
            positives: (0..n).filter(|&j| j != anchor && labels[j] == y).collect(),
            positives_with_self: (0..n).filter(|&j| labels[j] == y).collect(),
            negatives: (0..n).filter(|&j| labels[j] != y).collect(),
        }
    }

    /// `w_j`: 2 for the anchor's own column, 1 otherwise.
    pub fn weight(&self, j: usize) -> f64 {
        if j == self.anchor {
            2.0
        } else {
            1.0
        }
    }
}

/// Contribution of column `j` of anchor `i`'s row to `∂R/∂v_i`:
/// `α w_j (P_ij − S_ij)(z_j − (z_i·z_j) z_i) / (τ|B|²‖v_i‖)`.
pub fn pair_contribution(
    batch: &EmbeddingBatch,
    student: &ListwiseDistribution,
    teacher: &ListwiseDistribution,
    cfg: &LsdConfig,
    t: usize,
    i: usize,
    j: usize,
) -> Result<Vec<f64>> {
    check_same_shape(student, teacher)?;
    let alpha = schedule_weight(t, cfg.total_epochs)?;
    let n = batch.len() as f64;
    let w = if i == j { 2.0 } else { 1.0 };
    let zi = batch.unit().row(i);
    let zj = batch.unit().row(j);
    let cos = dot(zi, zj);
    let scale = alpha * w * (student.p()[(i, j)] - teacher.p()[(i, j)])
        / (cfg.tau * n * n * batch.norms()[i]);
    Ok(zj
        .iter()
        .zip(zi)
        .map(|(&a, &b)| scale * (a - cos * b))
        .collect())
}

#[derive(Debug, Clone)]
pub struct AnchorGradient {
    /// Sum over `P*(i)`.
    pub positive: Vec<f64>,
    /// Sum over `N(i)`.
    pub negative: Vec<f64>,
}

impl AnchorGradient {
    pub fn total(&self) -> Vec<f64> {
        self.positive
            .iter()
            .zip(&self.negative)
            .map(|(a, b)| a + b)
            .collect()
    }
}

/// The part of `∂R/∂v_i` flowing through anchor `i`'s own row, split into the
/// positive and negative sums. Adding the column terms (anchor `i` appearing
/// in other rows) gives [`lsd_gradient`].
pub fn anchor_gradient(
    batch: &EmbeddingBatch,
    student: &ListwiseDistribution,
    teacher: &ListwiseDistribution,
    cfg: &LsdConfig,
    t: usize,
    i: usize,
) -> Result<AnchorGradient> {
    let ctx = LsdGradientContext::new(batch.labels(), i);
    let sum = |set: &[usize]| -> Result<Vec<f64>> {
        let mut acc = vec![0.0; batch.dim()];
        for &j in set {
            for (a, c) in acc
                .iter_mut()
                .zip(pair_contribution(batch, student, teacher, cfg, t, i, j)?)
            {
                *a += c;
            }
        }
        Ok(acc)
    };
    Ok(AnchorGradient {
        positive: sum(&ctx.positives_with_self)?,
        negative: sum(&ctx.negatives)?,
    })
}

/// `L = L_DML + τ²λ R`, gradients combined the same way.
pub fn combined_loss(
    dml: LossOutput,
    lsd_value: f64,
    lsd_grad: &Matrix,
    cfg: &LsdConfig,
) -> Result<LossOutput> {
    let w = cfg.objective_weight();
    if w == 0.0 {
        return Ok(dml);
    }
    let mut grad_raw = dml.grad_raw;
    grad_raw.add_scaled(lsd_grad, w)?;
    Ok(LossOutput {
        value: dml.value + w * lsd_value,
        grad_raw,
    })
}

/// The regularizer with teacher rows replaced by label-indicator rows.
pub fn hard_target_variant(batch: &EmbeddingBatch, cfg: &LsdConfig, t: usize) -> Result<f64> {
    Ok(hard_target_term(batch, cfg, t)?.value)
}

pub fn hard_target_term(batch: &EmbeddingBatch, cfg: &LsdConfig, t: usize) -> Result<LossOutput> {
    lsd_term(
        batch,
        &ListwiseDistribution::hard_targets(batch.labels()),
        cfg,
        t,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::testutil::{fd_gradient, gaussian, grouped_labels, rel_error};
    use proptest::prelude::*;

    fn cfg(tau: f64, total: usize) -> LsdConfig {
        LsdConfig::new(tau, 1.0, total, MetricKind::Dot).unwrap()
    }

    fn batch(m: Matrix, labels: Vec<usize>) -> EmbeddingBatch {
        EmbeddingBatch::new(m, labels).unwrap()
    }

    // Independent value oracle: normalize, similarity, log-softmax and the
    // double sum spelled out directly.
    fn oracle_value(v: &Matrix, teacher: &Matrix, tau: f64, alpha: f64) -> f64 {
        let unit = |m: &Matrix| -> Vec<Vec<f64>> {
            m.iter_rows()
                .map(|r| {
                    let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                    r.iter().map(|x| x / n).collect()
                })
                .collect()
        };
        let rows = |z: &[Vec<f64>]| -> Vec<Vec<f64>> {
            z.iter()
                .map(|a| {
                    let s: Vec<f64> = z
                        .iter()
                        .map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / tau)
                        .collect();
                    let lse = s.iter().map(|x| x.exp()).sum::<f64>().ln();
                    s.iter().map(|x| x - lse).collect()
                })
                .collect()
        };
        let lp = rows(&unit(v));
        let ls = rows(&unit(teacher));
        let n = v.rows() as f64;
        let mut total = 0.0;
        for (pr, sr) in lp.iter().zip(&ls) {
            for (p, s) in pr.iter().zip(sr) {
                total -= s.exp() * p;
            }
        }
        alpha * total / (n * n)
    }

    #[test]
    fn similarity_examples() {
        let m = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]).unwrap();
        let b = batch(m, vec![0, 0, 1, 1]);
        for kind in [MetricKind::Dot, MetricKind::Euclidean] {
            let s = similarity_matrix(&b, kind, SimilaritySource::Student).s;
            assert!((s[(0, 1)] - 1.0).abs() < 1e-12);
            assert!(s[(0, 2)].abs() < 1e-12);
            assert!((s[(0, 3)] + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn branches_agree_on_random_batches() {
        let mut rng = Rng::new(4);
        for _ in 0..200 {
            let n = 2 + rng.below(10);
            let b = batch(gaussian(&mut rng, n, 5), vec![0; n]);
            let d = similarity_matrix(&b, MetricKind::Dot, SimilaritySource::Student).s;
            let e = similarity_matrix(&b, MetricKind::Euclidean, SimilaritySource::Student).s;
            assert!(rel_error(&d, &e) < 1e-9);
            for i in 0..n {
                assert!((d[(i, i)] - 1.0).abs() < 1e-12);
            }
        }
    }

    fn sim(s: Matrix) -> SimilarityMatrix {
        SimilarityMatrix {
            s,
            source: SimilaritySource::Student,
        }
    }

    #[test]
    fn distribution_examples() {
        let uniform = listwise_distribution(&sim(Matrix::from_fn(4, 4, |_, _| 0.3)), 1.0).unwrap();
        assert!(uniform
            .p()
            .as_slice()
            .iter()
            .all(|&x| (x - 0.25).abs() < 1e-15));

        let mut rng = Rng::new(1);
        let s = Matrix::from_fn(6, 6, |_, _| rng.uniform_range(-1.0, 1.0));
        let hot = listwise_distribution(&sim(s), 100.0).unwrap();
        assert!(hot
            .p()
            .as_slice()
            .iter()
            .all(|&x| (x - 1.0 / 6.0).abs() < 0.01));

        let s = Matrix::from_rows(&[[1.0, 0.5, 0.0], [0.5, 1.0, 0.5], [0.0, 0.5, 1.0]]).unwrap();
        let d = listwise_distribution(&sim(s), 1.0).unwrap();
        let z = 1f64.exp() + 0.5f64.exp() + 1.0;
        let direct = [1f64.exp() / z, 0.5f64.exp() / z, 1.0 / z];
        for k in 0..3 {
            assert!((d.p()[(0, k)] - direct[k]).abs() < 1e-15);
            assert!((d.p()[(0, k)] - SOFTMAX_ROW_FIXTURE[k]).abs() < 1e-15);
        }
        assert!(matches!(
            listwise_distribution(&sim(Matrix::identity(2)), 0.0),
            Err(Error::InvalidTemperature(_))
        ));
    }

    const SOFTMAX_ROW_FIXTURE: [f64; 3] =
        [0.506480391055654, 0.3071958857184984, 0.18632372322584756];

    #[test]
    fn alpha_examples() {
        assert_eq!(alpha_schedule(75, 150).unwrap(), 0.5);
        assert_eq!(alpha_schedule(7, 7).unwrap(), 1.0);
        assert_eq!(alpha_schedule(1, 100).unwrap(), 0.01);
        assert!(alpha_schedule(0, 5).is_err());
        assert!(alpha_schedule(6, 5).is_err());
        for total in [1usize, 50, 150] {
            let mut prev = 0.0;
            for t in 1..=total {
                let a = alpha_schedule(t, total).unwrap();
                assert_eq!(a, t as f64 / total as f64);
                assert!(a > prev);
                prev = a;
            }
            assert_eq!(prev, 1.0);
        }
    }

    #[test]
    fn value_at_fixed_point_is_entropy() {
        let mut rng = Rng::new(2);
        let b = batch(gaussian(&mut rng, 5, 3), vec![0; 5]);
        let d = teacher_distribution(&b, &cfg(1.0, 10)).unwrap();
        let v = lsd_value(&d, &d, 4, 10).unwrap();
        let entropy: f64 = d.p().as_slice().iter().map(|&s| -s * s.ln()).sum();
        assert!((v - 0.4 * entropy / 25.0).abs() < 1e-14);
        assert_eq!(lsd_value(&d, &d, 0, 10).unwrap(), 0.0);
    }

    #[test]
    fn value_matches_oracle() {
        let mut rng = Rng::new(3);
        let v = gaussian(&mut rng, 6, 4);
        let t = gaussian(&mut rng, 6, 4);
        let c = cfg(0.5, 10);
        let s = teacher_distribution(&batch(t.clone(), vec![0; 6]), &c).unwrap();
        let r = lsd_term(&batch(v.clone(), vec![0; 6]), &s, &c, 3)
            .unwrap()
            .value;
        assert!((r - oracle_value(&v, &t, 0.5, 0.3)).abs() < 1e-13);
    }

    #[test]
    fn gibbs_inequality() {
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let t = gaussian(&mut rng, 6, 4);
            let teacher =
                teacher_distribution(&batch(t.clone(), vec![0; 6]), &cfg(1.0, 1)).unwrap();
            let base = lsd_value(&teacher, &teacher, 1, 1).unwrap();
            for _ in 0..100 {
                let mut v = t.clone();
                v.add_scaled(&gaussian(&mut rng, 6, 4), 0.3).unwrap();
                let s = teacher_distribution(&batch(v, vec![0; 6]), &cfg(1.0, 1)).unwrap();
                assert!(lsd_value(&s, &teacher, 1, 1).unwrap() >= base);
            }
        }
    }

    #[test]
    fn fixed_point_has_zero_gradient() {
        let mut rng = Rng::new(6);
        let m = gaussian(&mut rng, 8, 5);
        let b = batch(m, grouped_labels(4, 2));
        let g = lsd_gradient(&b, &b, &cfg(1.0, 4), 4).unwrap();
        assert!(g.max_abs() < 1e-9);
    }

    fn fd_check(
        rng: &mut Rng,
        n: usize,
        dim: usize,
        tau: f64,
        t: usize,
        total: usize,
        metric: MetricKind,
    ) -> f64 {
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let v = gaussian(rng, n, dim);
        let tm = gaussian(rng, n, dim);
        let c = LsdConfig::new(tau, 1.0, total, metric).unwrap();
        let tb = batch(tm, labels.clone());
        let analytic = lsd_gradient(&batch(v.clone(), labels.clone()), &tb, &c, t).unwrap();
        let teacher = teacher_distribution(&tb, &c).unwrap();
        let fd = fd_gradient(&v, 1e-6, |x| {
            let s = similarity_matrix(
                &batch(x.clone(), labels.clone()),
                metric,
                SimilaritySource::Student,
            );
            lsd_value(&listwise_distribution(&s, tau).unwrap(), &teacher, t, total).unwrap()
        });
        rel_error(&analytic, &fd)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(7);
        for (k, tau) in [0.5, 1.0, 2.0].into_iter().enumerate() {
            for (t, total) in [(1, 10), (5, 10), (10, 10)] {
                let metric = if k % 2 == 0 {
                    MetricKind::Dot
                } else {
                    MetricKind::Euclidean
                };
                let e = fd_check(&mut rng, 4 + 3 * k, 3, tau, t, total, metric);
                assert!(e < 1e-4, "tau {tau} t {t}: {e}");
            }
        }
    }

    #[test]
    fn frozen_four_sample_gradient() {
        let mut rng = Rng::new(2024);
        let v = gaussian(&mut rng, 4, 3);
        let t = gaussian(&mut rng, 4, 3);
        let labels = grouped_labels(2, 2);
        let c = cfg(1.0, 2);
        let g = lsd_gradient(&batch(v, labels.clone()), &batch(t, labels), &c, 1).unwrap();
        let fixture = Matrix::from_vec(4, 3, FD_FIXTURE.to_vec()).unwrap();
        assert!(rel_error(&g, &fixture) < 1e-4, "{:?}", g.as_slice());
    }

    // Central differences (step 1e-6) of the value on the seed-2024 batch above.
    const FD_FIXTURE: [f64; 12] = [
        0.041320351695794955,
        -0.027603519914265462,
        0.0527838487918153,
        0.002312307526008972,
        0.0039789148642555006,
        -0.003250526889320149,
        -0.0022304765256997428,
        -0.005022291041378857,
        -0.0006616036052342622,
        0.001171501215480042,
        -0.0030424759933644907,
        -0.00048276753428222463,
    ];

    #[test]
    fn row_form_plus_column_terms_is_full_gradient() {
        let mut rng = Rng::new(8);
        let labels = grouped_labels(3, 2);
        let b = batch(gaussian(&mut rng, 6, 4), labels.clone());
        let tb = batch(gaussian(&mut rng, 6, 4), labels);
        let c = cfg(1.0, 3);
        let student = teacher_distribution(&b, &c).unwrap();
        let teacher = teacher_distribution(&tb, &c).unwrap();
        let full = lsd_gradient(&b, &tb, &c, 2).unwrap();
        for i in 0..6 {
            let row = anchor_gradient(&b, &student, &teacher, &c, 2, i)
                .unwrap()
                .total();
            // column terms: anchor i appearing as j in row a, pulled back through z_i
            let mut col = [0.0; 4];
            let zi = b.unit().row(i);
            for a in (0..6).filter(|&a| a != i) {
                let za = b.unit().row(a);
                let cos = dot(zi, za);
                let coef =
                    (2.0 / 3.0) * (student.p()[(a, i)] - teacher.p()[(a, i)]) / 36.0 / b.norms()[i];
                for k in 0..4 {
                    col[k] += coef * (za[k] - cos * zi[k]);
                }
            }
            for k in 0..4 {
                assert!((row[k] + col[k] - full[(i, k)]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn easy_positive_contributes_nothing() {
        let b = batch(
            Matrix::from_rows(&[[1.0, 0.0], [1.0, 1e-9f64.sqrt() * 2f64.sqrt()], [0.0, 1.0]])
                .unwrap(),
            vec![0, 0, 1],
        );
        let c = cfg(1.0, 1);
        let student = teacher_distribution(&b, &c).unwrap();
        let teacher = ListwiseDistribution::hard_targets(b.labels());
        let g = pair_contribution(&b, &student, &teacher, &c, 1, 0, 1).unwrap();
        let cos = dot(b.unit().row(0), b.unit().row(1));
        let bound = (1.0 - cos * cos).sqrt() * (student.p()[(0, 1)] - teacher.p()[(0, 1)]).abs();
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm <= bound + 1e-15);
        assert!(norm < 1e-4);
    }

    #[test]
    fn context_sets() {
        let ctx = LsdGradientContext::new(&[0, 1, 0, 0, 2], 2);
        assert_eq!(ctx.positives, vec![0, 3]);
        assert_eq!(ctx.positives_with_self, vec![0, 2, 3]);
        assert_eq!(ctx.negatives, vec![1, 4]);
        assert_eq!(ctx.weight(2), 2.0);
        assert_eq!(ctx.weight(0), 1.0);
    }

    #[test]
    fn combined_loss_examples() {
        let mut rng = Rng::new(9);
        let g = gaussian(&mut rng, 3, 2);
        let dml = LossOutput {
            value: 1.5,
            grad_raw: g.clone(),
        };
        let lsd_g = gaussian(&mut rng, 3, 2);
        let zero = LsdConfig::new(2.0, 0.0, 5, MetricKind::Dot).unwrap();
        let out = combined_loss(dml.clone(), 9.0, &lsd_g, &zero).unwrap();
        assert_eq!(out.value, 1.5);
        assert_eq!(out.grad_raw, g);

        let c = LsdConfig::new(2.0, 10.0, 5, MetricKind::Dot).unwrap();
        let none = LossOutput {
            value: 0.0,
            grad_raw: Matrix::zeros(3, 2),
        };
        let out = combined_loss(none, 0.25, &lsd_g, &c).unwrap();
        assert_eq!(out.value, 10.0);
        let mut expected = lsd_g.clone();
        expected.scale(40.0);
        assert!(rel_error(&out.grad_raw, &expected) < 1e-15);
    }

    #[test]
    fn combined_loss_recomputation() {
        let mut rng = Rng::new(10);
        let labels = grouped_labels(2, 3);
        let b = batch(gaussian(&mut rng, 6, 3), labels.clone());
        let tb = batch(gaussian(&mut rng, 6, 3), labels.clone());
        let c = LsdConfig::new(1.0, 500.0, 4, MetricKind::Dot).unwrap();
        let dml = crate::losses::contrastive_loss(&b, 0.5).unwrap();
        let teacher = teacher_distribution(&tb, &c).unwrap();
        let term = lsd_term(&b, &teacher, &c, 3).unwrap();
        let out = combined_loss(dml.clone(), term.value, &term.grad_raw, &c).unwrap();
        let r = oracle_value(b.raw(), tb.raw(), 1.0, 0.75);
        assert!((out.value - (dml.value + 500.0 * r)).abs() < 1e-10);
    }

    #[test]
    fn hard_target_examples() {
        // student rows already uniform on positives: value is the scaled entropy
        let labels = vec![0, 0, 1, 1];
        let targets = ListwiseDistribution::hard_targets(&labels);
        let v = lsd_value(&targets, &targets, 2, 2).unwrap();
        assert!((v - 4.0 * 2f64.ln() / 16.0).abs() < 1e-15);

        let mut rng = Rng::new(11);
        let c = cfg(1.0, 2);
        let b = batch(gaussian(&mut rng, 5, 3), vec![3; 5]);
        let uniform = Matrix::from_fn(5, 5, |_, _| 0.2);
        let expected = lsd_term(
            &b,
            &ListwiseDistribution::from_rows(uniform).unwrap(),
            &c,
            2,
        )
        .unwrap()
        .value;
        assert!((hard_target_variant(&b, &c, 2).unwrap() - expected).abs() < 1e-15);

        for _ in 0..50 {
            let b = batch(gaussian(&mut rng, 6, 3), vec![0, 1, 0, 1, 2, 2]);
            assert!(hard_target_variant(&b, &c, 1).unwrap() >= 0.0);
        }
    }

    #[test]
    fn hard_target_gradient_matches_finite_differences() {
        let mut rng = Rng::new(12);
        let labels = vec![0, 0, 1, 1, 1, 2];
        let v = gaussian(&mut rng, 6, 3);
        let c = cfg(0.5, 3);
        let g = hard_target_term(&batch(v.clone(), labels.clone()), &c, 2)
            .unwrap()
            .grad_raw;
        let fd = fd_gradient(&v, 1e-6, |x| {
            hard_target_variant(&batch(x.clone(), labels.clone()), &c, 2).unwrap()
        });
        assert!(rel_error(&g, &fd) < 1e-4);
    }

    #[test]
    fn permuting_rows_permutes_gradient() {
        let mut rng = Rng::new(13);
        let labels = vec![0, 0, 1, 1, 2];
        let v = gaussian(&mut rng, 5, 3);
        let t = gaussian(&mut rng, 5, 3);
        let c = cfg(1.0, 2);
        let g = lsd_gradient(
            &batch(v.clone(), labels.clone()),
            &batch(t.clone(), labels.clone()),
            &c,
            1,
        )
        .unwrap();
        let perm = [3, 0, 4, 1, 2];
        let pl: Vec<usize> = perm.iter().map(|&k| labels[k]).collect();
        let gp = lsd_gradient(
            &batch(v.select_rows(&perm), pl.clone()),
            &batch(t.select_rows(&perm), pl),
            &c,
            1,
        )
        .unwrap();
        assert!(rel_error(&gp, &g.select_rows(&perm)) < 1e-12);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(LsdConfig::new(0.0, 1.0, 1, MetricKind::Dot).is_err());
        assert!(LsdConfig::new(1.0, -1.0, 1, MetricKind::Dot).is_err());
        assert!(LsdConfig::new(1.0, 1.0, 0, MetricKind::Dot).is_err());
    }

    proptest! {
        #[test]
        fn rows_sum_to_one(seed in 0u64..1000, n in 2usize..12, tau in 0.05f64..20.0) {
            let mut rng = Rng::new(seed);
            let b = batch(gaussian(&mut rng, n, 4), vec![0; n]);
            let d = teacher_distribution(&b, &LsdConfig::new(tau, 1.0, 1, MetricKind::Dot).unwrap()).unwrap();
            for row in d.p().iter_rows() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&x| x > 0.0 && x < 1.0));
            }
        }

        #[test]
        fn similarity_is_symmetric_and_bounded(seed in 0u64..1000, n in 2usize..12) {
            let mut rng = Rng::new(seed);
            let b = batch(gaussian(&mut rng, n, 3), vec![0; n]);
            let s = similarity_matrix(&b, MetricKind::Euclidean, SimilaritySource::Student).s;
            for i in 0..n {
                for j in 0..n {
                    prop_assert!((s[(i, j)] - s[(j, i)]).abs() < 1e-9);
                    prop_assert!(s[(i, j)].abs() <= 1.0 + 1e-12);
                }
            }
        }

        #[test]
        fn value_is_nonnegative(seed in 0u64..1000, t in 0usize..=5) {
            let mut rng = Rng::new(seed);
            let c = cfg(1.0, 5);
            let s = teacher_distribution(&batch(gaussian(&mut rng, 5, 3), vec![0; 5]), &c).unwrap();
            let p = teacher_distribution(&batch(gaussian(&mut rng, 5, 3), vec![0; 5]), &c).unwrap();
            prop_assert!(lsd_value(&p, &s, t, 5).unwrap() >= 0.0);
        }
    }
}
