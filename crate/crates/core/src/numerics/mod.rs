//! Deterministic numeric primitives shared by every other module.

mod matrix;
mod rng;
mod svd;

pub use matrix::{dot, norm, squared_distance, Matrix};
pub use rng::Rng;
pub use svd::{svd, svd_singular_values, Svd};

use crate::{Error, Result};

/// Norms at or below this are treated as degenerate.
pub const MIN_NORM: f64 = 1e-12;

/// A vector with Euclidean norm 1 (to within 1e-9).
#[derive(Debug, Clone, PartialEq)]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Deref for UnitVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

pub fn normalize(v: &[f64]) -> Result<UnitVector> {
    let n = norm(v);
    if !(n > MIN_NORM) || !n.is_finite() {
        return Err(Error::DegenerateVector { norm: n });
    }
    Ok(UnitVector(v.iter().map(|x| x / n).collect()))
}

/// Row-wise normalization. Returns the unit matrix and the original row norms.
pub fn normalize_rows(m: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let n = norm(m.row(i));
        if !(n > MIN_NORM) || !n.is_finite() {
            return Err(Error::DegenerateVector { norm: n });
        }
        out.row_mut(i).iter_mut().for_each(|x| *x /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// Temperature softmax `exp(s_k/τ) / Σ exp(s_j/τ)`, max-shifted for stability.
pub fn softmax_row(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    let log_p = log_softmax_row(scores, tau)?;
    Ok(log_p.into_iter().map(f64::exp).collect())
}

/// Log of [`softmax_row`], computed without forming the probabilities.
pub fn log_softmax_row(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidTemperature(tau));
    }
    let max = scores
        .iter()
        .fold(f64::NEG_INFINITY, |m, &s| m.max(s / tau));
    let lse = scores
        .iter()
        .map(|&s| (s / tau - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    Ok(scores.iter().map(|&s| s / tau - lse).collect())
}
