//! Run artifacts: `epochs.csv`, `timings.csv`, `summary.json`, `checkpoint`,
//! `config.resolved`.
//!
//! `epochs.csv` holds only quantities that are a pure function of config and
//! seed, so repeated runs produce identical bytes. Wall-clock time goes to
//! `timings.csv`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use lsdml_core::eval::DensityReport;

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::train::{DivergenceDump, EpochLogRow, EvalReport, TrainOutcome};

pub const EPOCHS_CSV: &str = "epochs.csv";
pub const TIMINGS_CSV: &str = "timings.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const CHECKPOINT: &str = "checkpoint";
pub const CONFIG_RESOLVED: &str = "config.resolved";
pub const DIVERGENCE_JSON: &str = "divergence.json";

/// Writes through a sibling temporary file and renames it into place, so
/// readers never observe a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:?}"))
}

pub fn epochs_csv(rows: &[EpochLogRow]) -> String {
    let mut s = String::from(
        "epoch,alpha,dml_loss,lsd_loss,combined_loss,recall_at_1,map,pi_ratio,spectral_score\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:?},{:?},{:?},{:?},{},{},{},{}",
            r.epoch,
            r.alpha,
            r.dml_loss,
            r.lsd_loss,
            r.combined_loss,
            opt(r.recall_at_1),
            opt(r.map),
            opt(r.pi_ratio),
            opt(r.spectral_score)
        );
    }
    s
}

pub fn timings_csv(rows: &[EpochLogRow]) -> String {
    let mut s = String::from("epoch,wall_seconds\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6}", r.epoch, r.wall_seconds);
    }
    s
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub epochs: usize,
    pub lsd_active: bool,
    pub train_samples: usize,
    pub test_samples: usize,
    pub corrupted_labels: usize,
    pub final_epoch: EpochLogRow,
    pub report: EvalReport,
    pub train_density: DensityReport,
}

pub fn summary(cfg: &ExperimentConfig, outcome: &TrainOutcome) -> Summary {
    Summary {
        seed: cfg.seed,
        epochs: cfg.train.epochs,
        lsd_active: cfg.lsd_active(),
        train_samples: outcome.train.len(),
        test_samples: outcome.test.len(),
        corrupted_labels: outcome.train.noise_record().len(),
        final_epoch: outcome.log.last().expect("at least one epoch").clone(),
        report: outcome.final_report.clone(),
        train_density: outcome.train_density.clone(),
    }
}

pub fn write_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join(CONFIG_RESOLVED), cfg.to_toml()?.as_bytes())
}

/// Emits every artifact of a finished run into `dir`.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, outcome: &TrainOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join(EPOCHS_CSV), epochs_csv(&outcome.log).as_bytes())?;
    write_atomic(&dir.join(TIMINGS_CSV), timings_csv(&outcome.log).as_bytes())?;
    let mut ckpt = Vec::new();
    outcome.encoder.write_checkpoint(&mut ckpt)?;
    write_atomic(&dir.join(CHECKPOINT), &ckpt)?;
    let json = serde_json::to_vec_pretty(&summary(cfg, outcome))?;
    write_atomic(&dir.join(SUMMARY_JSON), &json)
}

pub fn write_divergence(dir: &Path, dump: &DivergenceDump) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_atomic(
        &dir.join(DIVERGENCE_JSON),
        &serde_json::to_vec_pretty(dump)?,
    )
}
