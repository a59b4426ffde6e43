//! One-parameter sweeps over paired seeds.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::train::train;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Lambda,
    Tau,
    NoiseRatio,
}

impl SweepParam {
    pub fn name(&self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::Tau => "tau",
            SweepParam::NoiseRatio => "noise_ratio",
        }
    }

    pub fn apply(&self, cfg: &mut ExperimentConfig, value: f64) {
        match self {
            SweepParam::Lambda => cfg.lsd.lambda = value,
            SweepParam::Tau => cfg.lsd.tau = value,
            SweepParam::NoiseRatio => cfg.data.noise_ratio = value,
        }
    }
}

impl FromStr for SweepParam {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepParam::Lambda),
            "tau" => Ok(SweepParam::Tau),
            "noise_ratio" | "noise" => Ok(SweepParam::NoiseRatio),
            other => Err(HarnessError::Config(format!(
                "unknown sweep parameter {other:?} (lambda, tau, noise_ratio)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub recall_at_1: f64,
    pub map: f64,
    /// Density ratio on the test split.
    pub pi_ratio: f64,
    /// Density ratio of the training embeddings under the training labels.
    pub train_pi_ratio: f64,
    pub spectral_score: f64,
}

/// Runs `base` once per (value, seed). Every value sees the same seeds.
pub fn sweep(
    base: &ExperimentConfig,
    param: SweepParam,
    values: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if values.len() < 2 {
        return Err(HarnessError::Config(
            "a sweep needs at least 2 values".into(),
        ));
    }
    if seeds.is_empty() {
        return Err(HarnessError::Config(
            "a sweep needs at least one seed".into(),
        ));
    }
    let mut rows = Vec::with_capacity(values.len() * seeds.len());
    for &value in values {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            param.apply(&mut cfg, value);
            cfg.validate()?;
            let out = train(&cfg)?;
            let r = &out.final_report;
            log::info!(
                "{} = {value}, seed {seed}: R@1 {:.4}",
                param.name(),
                r.recall_at_1()
            );
            rows.push(SweepRow {
                value,
                seed,
                recall_at_1: r.recall_at_1(),
                map: r.retrieval.map_score,
                pi_ratio: r.density.pi_ratio,
                train_pi_ratio: out.train_density.pi_ratio,
                spectral_score: r.spectral.score,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(param: SweepParam, rows: &[SweepRow]) -> String {
    let mut s = format!(
        "{},seed,recall_at_1,map,pi_ratio,train_pi_ratio,spectral_score\n",
        param.name()
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:?},{},{:?},{:?},{:?},{:?},{:?}",
            r.value, r.seed, r.recall_at_1, r.map, r.pi_ratio, r.train_pi_ratio, r.spectral_score
        );
    }
    s
}
