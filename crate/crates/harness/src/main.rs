use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use lsdml::config::ExperimentConfig;
use lsdml::output::{self, write_atomic};
use lsdml::sweep::{sweep, sweep_csv, SweepParam};
use lsdml::train::{evaluate, prepare_data, train};
use lsdml::{HarnessError, Result};
use lsdml_core::data::{generate_synthetic, ingest_csv};
use lsdml_core::encoder::MlpEncoder;
use lsdml_core::eval::{embedding_density, spectral_decay};
use lsdml_core::numerics::Rng;

#[derive(Parser)]
#[command(
    name = "lsdml",
    version,
    about = "Listwise self-distillation metric-learning experiments"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dotted `key=value` config override; repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset and its split as CSV.
    GenData,
    /// Train one model and write epochs.csv, summary.json, checkpoint, config.resolved.
    Train,
    /// Evaluate a checkpoint on the test split.
    Eval {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train once per value of one parameter, over paired seeds.
    Sweep {
        /// One of `lambda`, `tau`, `noise_ratio`.
        #[arg(long)]
        param: String,
        /// Comma-separated values, at least two.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Seeds shared by every value; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Density and spectral reports of a checkpoint's embeddings.
    Diagnose {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut overrides = c.overrides.clone();
    if let Some(seed) = c.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(out) = &c.out {
        overrides.push(format!(
            "output_dir={}",
            toml::Value::String(out.display().to_string())
        ));
    }
    match &c.config {
        Some(path) => ExperimentConfig::load(path, &overrides),
        None => ExperimentConfig::default_with_overrides(&overrides),
    }
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/seed-{}", cfg.seed)))
}

fn print_json(value: &serde_json::Value, dir: Option<(&Path, &str)>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    println!("{text}");
    if let Some((dir, name)) = dir {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join(name), text.as_bytes())?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::GenData => {
            let dir = out_dir(&cfg);
            std::fs::create_dir_all(&dir)?;
            let full = match cfg.data.source {
                lsdml::config::DataSource::Synthetic => generate_synthetic(
                    &cfg.data.synthetic,
                    &mut Rng::new(cfg.seed).fork(lsdml::train::streams::DATA),
                )?,
                lsdml::config::DataSource::Csv => {
                    ingest_csv(cfg.data.csv_path.as_ref().expect("validated"))?
                }
            };
            let (train_ds, test_ds) = prepare_data(&cfg)?;
            full.write_csv(&dir.join("dataset.csv"))?;
            train_ds.write_csv(&dir.join("train.csv"))?;
            test_ds.write_csv(&dir.join("test.csv"))?;
            train_ds.write_noise_record(&dir.join("noise.csv"))?;
            output::write_config(&dir, &cfg)?;
            println!(
                "wrote {} samples ({} train, {} test, {} corrupted) to {}",
                full.len(),
                train_ds.len(),
                test_ds.len(),
                train_ds.noise_record().len(),
                dir.display()
            );
        }
        Command::Train => {
            let dir = out_dir(&cfg);
            output::write_config(&dir, &cfg)?;
            match train(&cfg) {
                Ok(outcome) => {
                    output::write_run(&dir, &cfg, &outcome)?;
                    println!(
                        "R@1 {:.4}  mAP {:.4}  pi_ratio {:.4}  -> {}",
                        outcome.final_report.recall_at_1(),
                        outcome.final_report.retrieval.map_score,
                        outcome.final_report.density.pi_ratio,
                        dir.display()
                    );
                }
                Err(HarnessError::Divergence {
                    epoch,
                    batch,
                    reason,
                    dump,
                }) => {
                    output::write_divergence(&dir, &dump)?;
                    return Err(HarnessError::Divergence {
                        epoch,
                        batch,
                        reason,
                        dump,
                    });
                }
                Err(e) => return Err(e),
            }
        }
        Command::Eval { checkpoint } => {
            let encoder = MlpEncoder::load(&checkpoint)?;
            let (_, test_ds) = prepare_data(&cfg)?;
            let report = evaluate(&encoder, &test_ds, &cfg.eval.recall_ks)?;
            print_json(
                &serde_json::to_value(&report)?,
                cli.common.out.as_deref().map(|d| (d, "eval.json")),
            )?;
        }
        Command::Sweep {
            param,
            values,
            seeds,
        } => {
            let param: SweepParam = param.parse()?;
            let seeds = if seeds.is_empty() {
                vec![cfg.seed]
            } else {
                seeds
            };
            let rows = sweep(&cfg, param, &values, &seeds)?;
            let dir = out_dir(&cfg);
            std::fs::create_dir_all(&dir)?;
            let table = sweep_csv(param, &rows);
            write_atomic(&dir.join("sweep.csv"), table.as_bytes())?;
            print!("{table}");
        }
        Command::Diagnose { checkpoint, split } => {
            let encoder = MlpEncoder::load(&checkpoint)?;
            let (train_ds, test_ds) = prepare_data(&cfg)?;
            let ds = match split {
                Split::Train => train_ds,
                Split::Test => test_ds,
            };
            if encoder.input_dim() != ds.dim() {
                return Err(lsdml_core::Error::Dimension {
                    context: "checkpoint input vs dataset",
                    expected: encoder.input_dim(),
                    actual: ds.dim(),
                }
                .into());
            }
            let emb = encoder.embed(ds.features())?;
            let value = json!({
                "samples": ds.len(),
                "density": embedding_density(&emb, ds.labels())?,
                "spectral": spectral_decay(&emb)?,
            });
            print_json(
                &value,
                cli.common.out.as_deref().map(|d| (d, "diagnose.json")),
            )?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
