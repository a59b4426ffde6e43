//! Listwise self-distillation for deep metric learning.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense matrices, normalization, temperature softmax, Jacobi SVD, seeded rng
//! - [`encoder`]: a small ReLU MLP embedder with manual backprop, teacher snapshots and Adam
//! - [`losses`]: baseline metric-learning objectives with analytic gradients
//! - [`samplers`]: class-balanced batch construction and triplet miners
//! - [`lsd`]: the listwise self-distillation regularizer and its closed-form gradient
//! - [`eval`]: Recall@K, mAP, embedding-space density and spectral decay
//! - [`data`]: synthetic clustered features, CSV ingestion, splits and label noise

// `!(x > 0.0)` is the NaN-rejecting form used for parameter checks
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod encoder;
mod error;
pub mod eval;
pub mod losses;
pub mod lsd;
pub mod numerics;
pub mod samplers;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod testutil;
