//! One-sided (Hestenes) Jacobi SVD for small dense matrices.

use super::matrix::{dot, Matrix};

const TOLERANCE: f64 = 1e-10;
const MAX_SWEEPS: usize = 100;

/// Thin SVD `A = U · diag(σ) · Vᵀ` with σ sorted descending.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `rows × k` left singular vectors, `k = min(rows, cols)`.
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    /// `cols × k` right singular vectors.
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let k = self.singular_values.len();
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for j in 0..k {
                us[(i, j)] *= self.singular_values[j];
            }
        }
        us.matmul_t(&self.v)
            .expect("svd factor shapes are consistent")
    }
}

pub fn svd(m: &Matrix) -> Svd {
    assert!(m.rows() > 0 && m.cols() > 0, "svd of an empty matrix");
    if m.rows() >= m.cols() {
        jacobi_tall(m)
    } else {
        let t = jacobi_tall(&m.transpose());
        Svd {
            u: t.v,
            singular_values: t.singular_values,
            v: t.u,
        }
    }
}

pub fn svd_singular_values(m: &Matrix) -> Vec<f64> {
    svd(m).singular_values
}

// Requires rows >= cols.
fn jacobi_tall(m: &Matrix) -> Svd {
    let (rows, n) = m.shape();
    // columns of A and V stored contiguously
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..rows).map(|i| m[(i, j)]).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= TOLERANCE * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<(f64, usize)> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| (dot(c, c).sqrt(), j))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut u = Matrix::zeros(rows, n);
    let mut vm = Matrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    for (k, &(s, j)) in order.iter().enumerate() {
        sigma.push(s);
        if s > 0.0 {
            for i in 0..rows {
                u[(i, k)] = cols[j][i] / s;
            }
        }
        for i in 0..n {
            vm[(i, k)] = v[j][i];
        }
    }
    Svd {
        u,
        singular_values: sigma,
        v: vm,
    }
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (a, b) = (&mut left[p], &mut right[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}
