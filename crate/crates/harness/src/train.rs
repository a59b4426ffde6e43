//! Training loop with a per-epoch teacher snapshot, plus evaluation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use lsdml_core::data::{
    class_disjoint_split, generate_synthetic, ingest_csv, inject_symmetric_noise, FeatureDataset,
};
use lsdml_core::encoder::{Adam, AdamConfig, MlpEncoder};
use lsdml_core::eval::{
    embedding_density, retrieval_report, spectral_decay, DensityReport, RetrievalReport,
    SpectralReport,
};
use lsdml_core::losses::{EmbeddingBatch, ProxyBank};
use lsdml_core::lsd::{
    alpha_schedule, combined_loss, lsd_term, teacher_distribution, ListwiseDistribution,
};
use lsdml_core::numerics::Rng;
use lsdml_core::samplers::sample_batch;

use crate::config::{DataSource, ExperimentConfig, LsdTarget};
use crate::error::{HarnessError, Result};

/// Independent random streams forked from the master seed.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const BATCH: u64 = 3;
    pub const MINER: u64 = 4;
    pub const NOISE: u64 = 5;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLogRow {
    pub epoch: usize,
    pub alpha: f64,
    pub dml_loss: f64,
    pub lsd_loss: f64,
    pub combined_loss: f64,
    pub recall_at_1: Option<f64>,
    pub map: Option<f64>,
    pub pi_ratio: Option<f64>,
    pub spectral_score: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub retrieval: RetrievalReport,
    pub density: DensityReport,
    pub spectral: SpectralReport,
}

impl EvalReport {
    pub fn recall_at_1(&self) -> f64 {
        self.retrieval
            .recall(1)
            .expect("recall_ks always contains 1")
    }
}

/// State captured when a batch produces a non-finite loss or gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceDump {
    pub epoch: usize,
    pub batch: usize,
    pub sample_indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub dml_loss: f64,
    pub lsd_loss: f64,
    pub max_abs_embedding: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub encoder: MlpEncoder,
    pub log: Vec<EpochLogRow>,
    pub final_report: EvalReport,
    /// Density of the training embeddings under the labels used for training.
    pub train_density: DensityReport,
    pub train: FeatureDataset,
    pub test: FeatureDataset,
}

/// Loads or generates the dataset, splits by class, and corrupts the
/// training side with the configured noise ratio.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<(FeatureDataset, FeatureDataset)> {
    let master = Rng::new(cfg.seed);
    let full = match cfg.data.source {
        DataSource::Synthetic => {
            generate_synthetic(&cfg.data.synthetic, &mut master.fork(streams::DATA))?
        }
        DataSource::Csv => {
            let path = cfg.data.csv_path.as_ref().ok_or_else(|| {
                HarnessError::Config("data.csv_path is required for csv data".into())
            })?;
            ingest_csv(path)?
        }
    };
    let (train, test) = class_disjoint_split(&full, &cfg.data.split_spec())?;
    let train = inject_symmetric_noise(
        &train,
        cfg.data.noise_ratio,
        &mut master.fork(streams::NOISE),
    )?;
    Ok((train, test))
}

/// Retrieval, density and spectral reports of `encoder` on `dataset`.
pub fn evaluate(
    encoder: &MlpEncoder,
    dataset: &FeatureDataset,
    recall_ks: &[usize],
) -> Result<EvalReport> {
    if encoder.input_dim() != dataset.dim() {
        return Err(lsdml_core::Error::Dimension {
            context: "checkpoint input vs dataset",
            expected: encoder.input_dim(),
            actual: dataset.dim(),
        }
        .into());
    }
    let emb = encoder.embed(dataset.features())?;
    Ok(EvalReport {
        retrieval: retrieval_report(&emb, dataset.labels(), recall_ks)?,
        density: embedding_density(&emb, dataset.labels())?,
        spectral: spectral_decay(&emb)?,
    })
}

pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let (train, test) = prepare_data(cfg)?;
    train_on(cfg, train, test)
}

/// Batches per epoch: one pass worth of samples, at least one batch.
pub fn batches_per_epoch(cfg: &ExperimentConfig, train_len: usize) -> usize {
    (train_len / cfg.train.batch_spec().batch_size()).max(1)
}

pub fn train_on(
    cfg: &ExperimentConfig,
    train: FeatureDataset,
    test: FeatureDataset,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let master = Rng::new(cfg.seed);
    let mut init_rng = master.fork(streams::INIT);
    let mut batch_rng = master.fork(streams::BATCH);
    let mut miner_rng = master.fork(streams::MINER);

    let mut dims = vec![train.dim()];
    dims.extend(&cfg.model.hidden);
    dims.push(cfg.model.embedding_dim);
    let mut encoder = MlpEncoder::new(&dims, &mut init_rng)?;
    let mut proxies = if cfg.train.loss.needs_proxies() {
        Some(ProxyBank::random(
            train.classes(),
            cfg.model.embedding_dim,
            &mut init_rng,
        )?)
    } else {
        None
    };
    let mut adam = Adam::new(AdamConfig::new(cfg.train.lr, cfg.train.weight_decay));
    let lsd_cfg = cfg.lsd_config();
    let lsd_on = cfg.lsd_active();
    let batch_spec = cfg.train.batch_spec();
    let batches = batches_per_epoch(cfg, train.len());
    let total = cfg.train.epochs;

    let mut log = Vec::with_capacity(total);
    let mut last_report = None;
    for epoch in 1..=total {
        let started = Instant::now();
        let teacher =
            (lsd_on && cfg.lsd.target == LsdTarget::Teacher).then(|| encoder.snapshot(epoch - 1));
        let alpha = alpha_schedule(epoch, total)?;
        let (mut dml_sum, mut lsd_sum, mut combined_sum) = (0.0, 0.0, 0.0);

        for b in 0..batches {
            let idx = sample_batch(train.labels(), &batch_spec, &mut batch_rng)?;
            let x = train.features().select_rows(&idx);
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels()[i]).collect();
            let (raw, trace) = encoder.forward(&x)?;
            if !raw.is_finite() {
                return Err(diverged(
                    epoch,
                    b,
                    &idx,
                    &labels,
                    raw.max_abs(),
                    f64::NAN,
                    f64::NAN,
                    "non-finite embeddings",
                ));
            }
            let batch = EmbeddingBatch::new(raw, labels)?;
            let triplets = if cfg.train.loss.needs_triplets() {
                Some(cfg.train.miner.mine(&batch, &mut miner_rng)?)
            } else {
                None
            };
            let (dml, proxy_grad) =
                cfg.train
                    .loss
                    .evaluate(&batch, triplets.as_ref(), proxies.as_ref())?;
            let dml_value = dml.value;

            let (lsd_value, combined) = if lsd_on {
                let targets = match &teacher {
                    Some(t) => {
                        let tb = EmbeddingBatch::new(t.embed(&x)?, batch.labels().to_vec())?;
                        teacher_distribution(&tb, &lsd_cfg)?
                    }
                    None => ListwiseDistribution::hard_targets(batch.labels()),
                };
                let term = lsd_term(&batch, &targets, &lsd_cfg, epoch)?;
                (
                    term.value,
                    combined_loss(dml, term.value, &term.grad_raw, &lsd_cfg)?,
                )
            } else {
                (0.0, dml)
            };

            if !combined.value.is_finite() || !combined.grad_raw.is_finite() {
                return Err(diverged(
                    epoch,
                    b,
                    &idx,
                    batch.labels(),
                    batch.raw().max_abs(),
                    dml_value,
                    lsd_value,
                    "non-finite loss",
                ));
            }
            let grads = encoder.backward(&trace, &combined.grad_raw)?;
            if let Err(e) = adam.step(&mut encoder, &grads) {
                return Err(diverged(
                    epoch,
                    b,
                    &idx,
                    batch.labels(),
                    batch.raw().max_abs(),
                    dml_value,
                    lsd_value,
                    &e.to_string(),
                ));
            }
            if let (Some(bank), Some(g)) = (proxies.as_mut(), proxy_grad) {
                bank.apply_gradient(&g, cfg.train.proxy_lr)?;
            }
            dml_sum += dml_value;
            lsd_sum += lsd_value;
            combined_sum += combined.value;
        }

        let report = if cfg.eval.per_epoch || epoch == total {
            Some(evaluate(&encoder, &test, &cfg.eval.recall_ks)?)
        } else {
            None
        };
        let n = batches as f64;
        let row = EpochLogRow {
            epoch,
            alpha,
            dml_loss: dml_sum / n,
            lsd_loss: lsd_sum / n,
            combined_loss: combined_sum / n,
            recall_at_1: report.as_ref().map(EvalReport::recall_at_1),
            map: report.as_ref().map(|r| r.retrieval.map_score),
            pi_ratio: report.as_ref().map(|r| r.density.pi_ratio),
            spectral_score: report.as_ref().map(|r| r.spectral.score),
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}/{total} dml {:.5} lsd {:.5} R@1 {}",
            row.dml_loss,
            row.lsd_loss,
            row.recall_at_1.map_or("-".into(), |r| format!("{r:.4}"))
        );
        log.push(row);
        last_report = report;
    }
    let train_density = embedding_density(&encoder.embed(train.features())?, train.labels())?;
    Ok(TrainOutcome {
        encoder,
        log,
        final_report: last_report.expect("final epoch is always evaluated"),
        train_density,
        train,
        test,
    })
}

#[allow(clippy::too_many_arguments)]
fn diverged(
    epoch: usize,
    batch: usize,
    idx: &[usize],
    labels: &[usize],
    max_abs_embedding: f64,
    dml: f64,
    lsd: f64,
    reason: &str,
) -> HarnessError {
    HarnessError::Divergence {
        epoch,
        batch,
        reason: reason.to_string(),
        dump: Box::new(DivergenceDump {
            epoch,
            batch,
            sample_indices: idx.to_vec(),
            labels: labels.to_vec(),
            dml_loss: dml,
            lsd_loss: lsd,
            max_abs_embedding,
        }),
    }
}
