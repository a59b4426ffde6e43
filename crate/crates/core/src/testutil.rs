//! Oracles shared by unit tests. Nothing here calls into the code under test
//! except through the closure being differentiated.

use crate::numerics::{Matrix, Rng};

/// Central-difference gradient of `f` at `x`.
pub fn fd_gradient(x: &Matrix, h: f64, f: impl Fn(&Matrix) -> f64) -> Matrix {
    let mut g = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for k in 0..x.as_slice().len() {
        let orig = probe.as_slice()[k];
        probe.as_mut_slice()[k] = orig + h;
        let up = f(&probe);
        probe.as_mut_slice()[k] = orig - h;
        let down = f(&probe);
        probe.as_mut_slice()[k] = orig;
        g.as_mut_slice()[k] = (up - down) / (2.0 * h);
    }
    g
}

/// `‖a − b‖∞ / max(‖b‖∞, 1e-8)`
pub fn rel_error(a: &Matrix, b: &Matrix) -> f64 {
    let diff = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff / b.max_abs().max(1e-8)
}

pub fn gaussian(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

/// `classes × per_class` labels, grouped.
pub fn grouped_labels(classes: usize, per_class: usize) -> Vec<usize> {
    (0..classes * per_class).map(|i| i / per_class).collect()
}
