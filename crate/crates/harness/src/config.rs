//! Experiment configuration.
//!
//! Configs are TOML. A file is overlaid on the defaults, so an empty file
//! describes the synth-hard run with the regularizer on and any section may be
//! partial. `--override key=value` patches a
//! dotted path (`lsd.lambda=50`, `train.loss.margin=0.3`) before validation;
//! the value is read as a TOML literal and falls back to a bare string.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use lsdml_core::data::{SplitSize, SplitSpec, SyntheticSpec};
use lsdml_core::losses::LossKind;
use lsdml_core::lsd::{LsdConfig, MetricKind};
use lsdml_core::samplers::{BatchSpec, MinerKind};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub lsd: LsdSection,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub csv_path: Option<PathBuf>,
    /// Fraction of classes used for training; the rest form the test side.
    pub train_fraction: f64,
    /// Shuffles classes before splitting; unset keeps the lowest ids for training.
    pub split_seed: Option<u64>,
    /// Symmetric label noise applied to the training side only.
    pub noise_ratio: f64,
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            csv_path: None,
            train_fraction: 0.5,
            split_seed: None,
            noise_ratio: 0.0,
            synthetic: SyntheticSpec::synth_hard(),
        }
    }
}

impl DataConfig {
    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train_classes: SplitSize::Fraction(self.train_fraction),
            seed: self.split_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128],
            embedding_dim: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub classes_per_batch: usize,
    pub samples_per_class: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Learning rate for ProxyNCA proxies.
    pub proxy_lr: f64,
    pub loss: LossKind,
    pub miner: MinerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            classes_per_batch: 8,
            samples_per_class: 4,
            lr: 1e-3,
            weight_decay: 0.0,
            proxy_lr: 1e-2,
            loss: LossKind::TRIPLET_DEFAULT,
            miner: MinerKind::SEMIHARD_DEFAULT,
        }
    }
}

impl TrainConfig {
    pub fn batch_spec(&self) -> BatchSpec {
        BatchSpec {
            classes_per_batch: self.classes_per_batch,
            samples_per_class: self.samples_per_class,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LsdTarget {
    /// Rows from the previous-epoch teacher snapshot.
    #[default]
    Teacher,
    /// Label-indicator rows (ablation).
    HardLabels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LsdSection {
    pub enabled: bool,
    pub target: LsdTarget,
    pub tau: f64,
    pub lambda: f64,
    pub metric_kind: MetricKind,
}

impl Default for LsdSection {
    fn default() -> Self {
        Self {
            enabled: true,
            target: LsdTarget::Teacher,
            tau: 1.0,
            lambda: 30_000.0,
            metric_kind: MetricKind::Dot,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluate on the test side after every epoch, not only the last.
    pub per_epoch: bool,
    pub recall_ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            per_epoch: true,
            recall_ks: vec![1, 2, 4, 8],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        Self::from_toml_with_overrides(text, origin, &[])
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_with_overrides(&text, path, overrides)
    }

    /// Parses, applies `key=value` overrides in order, and validates.
    pub fn from_toml_with_overrides(
        text: &str,
        origin: &Path,
        overrides: &[String],
    ) -> Result<Self> {
        let parsed: toml::Table = text.parse().map_err(|source| HarnessError::ConfigParse {
            path: origin.to_path_buf(),
            source,
        })?;
        let mut value: toml::Table = toml::Table::try_from(Self::default())?;
        merge(&mut value, parsed);
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self =
            toml::Value::Table(value)
                .try_into()
                .map_err(|source| HarnessError::ConfigParse {
                    path: origin.to_path_buf(),
                    source,
                })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults with overrides applied.
    pub fn default_with_overrides(overrides: &[String]) -> Result<Self> {
        Self::from_toml_with_overrides("", Path::new("<defaults>"), overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn lsd_config(&self) -> LsdConfig {
        LsdConfig {
            tau: self.lsd.tau,
            lambda: self.lsd.lambda,
            total_epochs: self.train.epochs,
            metric_kind: self.lsd.metric_kind,
        }
    }

    /// Whether the regularizer contributes at all; `lambda = 0` counts as off.
    pub fn lsd_active(&self) -> bool {
        self.lsd.enabled && self.lsd.lambda > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.train.epochs == 0 {
            return bad("train.epochs must be >= 1".into());
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return bad(format!("train.lr {} must be > 0", self.train.lr));
        }
        if !(self.train.weight_decay >= 0.0) {
            return bad("train.weight_decay must be >= 0".into());
        }
        if !(self.train.proxy_lr > 0.0) {
            return bad("train.proxy_lr must be > 0".into());
        }
        self.train
            .batch_spec()
            .validate()
            .map_err(|e| HarnessError::Config(format!("train batch: {e}")))?;
        if self.model.embedding_dim < 2 || self.model.hidden.contains(&0) {
            return bad("model sizes must be positive and embedding_dim >= 2".into());
        }
        if self.lsd.enabled {
            self.lsd_config()
                .validate()
                .map_err(|e| HarnessError::Config(format!("lsd: {e}")))?;
        }
        if !(0.0..1.0).contains(&self.data.noise_ratio) {
            return bad(format!(
                "data.noise_ratio {} outside [0, 1)",
                self.data.noise_ratio
            ));
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return bad(format!(
                "data.train_fraction {} outside (0, 1)",
                self.data.train_fraction
            ));
        }
        match self.data.source {
            DataSource::Synthetic => self
                .data
                .synthetic
                .validate()
                .map_err(|e| HarnessError::Config(format!("data.synthetic: {e}")))?,
            DataSource::Csv if self.data.csv_path.is_none() => {
                return bad("data.csv_path is required when data.source = \"csv\"".into())
            }
            DataSource::Csv => {}
        }
        if self.eval.recall_ks.is_empty() || self.eval.recall_ks.contains(&0) {
            return bad("eval.recall_ks must be nonempty and positive".into());
        }
        if !self.eval.recall_ks.contains(&1) {
            return bad("eval.recall_ks must include 1".into());
        }
        Ok(())
    }
}

/// Recursively overlays `top` onto `base`; tables merge, everything else replaces.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `a.b.c = value` inside `root`, creating intermediate tables.
pub fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override {spec:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(HarnessError::Config(format!(
            "override key {key:?} is malformed"
        )));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => {
                return Err(HarnessError::Config(format!(
                    "override {key:?}: {p} is not a section"
                )))
            }
        };
    }
    table.insert(last.to_string(), parse_literal(raw.trim()));
    Ok(())
}
