//! Experiment driver for listwise self-distillation metric learning:
//! configuration, training, evaluation, sweeps and run artifacts.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
mod error;
pub mod output;
pub mod sweep;
pub mod train;

pub use error::{HarnessError, Result};
