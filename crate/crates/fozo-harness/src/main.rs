//! `fozo` CLI: pretrain, estimate stats, adapt over a stream, run experiment
//! grids, run estimator diagnostics, quantize.
//!
//! Output formats are documented in `docs/formats.md`.

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use fozo::model::Checkpoint;
use fozo::quant::quantize;
use fozo::stream::generate_source;
use fozo::{
    estimate_source_stats, mean_accuracy, metrics_to_csv, predict, PromptModel, SeedStream,
    SourceStats,
};
use fozo_harness::diagnostics::{run_bias_variance_diagnostics, DiagnosticsOptions};
use fozo_harness::experiment::{run_arm, run_experiment, Arm, ExperimentConfig, ExperimentMode};
use fozo_harness::pretrain::{pretrain_checkpoint, PretrainOptions};
use serde::Serialize;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "fozo",
    version,
    about = "Forward-only zeroth-order test-time adaptation toolkit"
)]
struct Cli {
    /// Experiment config JSON; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Base seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output path (file for single artifacts, directory for experiments).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Adaptation config override, `key=value` (repeatable). Keys: eta,
    /// n_spsa, n_prompts, eps0, eps_min, alpha, tau, beta, lambda, seed,
    /// eta_decay, fixed_eps.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the frozen source model and write a checkpoint.
    Pretrain,
    /// Estimate source statistics on clean validation data.
    Stats {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Estimate on the INT8 model instead of the float one.
        #[arg(long)]
        quantized: bool,
        #[arg(long, default_value_t = 512)]
        n_samples: usize,
    },
    /// One adaptation run over a stream; writes a metrics CSV.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        /// Schedule JSON; defaults to the mode's standard protocol.
        #[arg(long)]
        schedule: Option<PathBuf>,
        /// dynamic | fixed | no-adapt | zero-eta
        #[arg(long, default_value = "dynamic")]
        arm: String,
        /// continual | reset-on-switch | mixed
        #[arg(long, default_value = "continual")]
        mode: String,
        #[arg(long)]
        quantized: bool,
    },
    /// Full (arm x seed) experiment grid with per-run CSVs and summary JSON.
    Experiment {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        /// Stats estimated on the quantized model (required when the config
        /// sets quantized=true).
        #[arg(long)]
        quant_stats: Option<PathBuf>,
    },
    /// Estimator diagnostics: bias slope, variance ratio, error floor.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        stats: PathBuf,
    },
    /// Quantize a checkpoint and report agreement with the float model.
    Quantize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        bits: u8,
    },
}

fn parse_arm(s: &str) -> anyhow::Result<Arm> {
    Ok(match s {
        "dynamic" => Arm::Dynamic,
        "fixed" => Arm::Fixed,
        "no-adapt" => Arm::NoAdapt,
        "zero-eta" => Arm::ZeroEta,
        other => bail!("unknown arm '{other}' (dynamic | fixed | no-adapt | zero-eta)"),
    })
}

fn parse_mode(s: &str) -> anyhow::Result<ExperimentMode> {
    Ok(match s {
        "continual" => ExperimentMode::Continual,
        "reset-on-switch" => ExperimentMode::ResetOnSwitch,
        "mixed" => ExperimentMode::Mixed,
        other => bail!("unknown mode '{other}' (continual | reset-on-switch | mixed)"),
    })
}

#[derive(Serialize)]
struct QuantReport {
    bits: u8,
    max_roundtrip_error_in_scale_units: f64,
    clean_agreement: f64,
    float_weight_hash: String,
    quant_weight_hash: String,
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();

    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.adapt.seed = seed;
    }
    for kv in &cli.set {
        let (key, value) = kv
            .split_once('=')
            .with_context(|| format!("--set expects key=value, got '{kv}'"))?;
        config.adapt.set_key(key, value)?;
    }
    let base_seed = config.adapt.seed;

    match cli.command {
        Command::Pretrain => {
            let out = cli.out.context("--out <checkpoint.json> is required")?;
            let ckpt = pretrain_checkpoint(
                &config.model,
                &config.task,
                base_seed,
                &PretrainOptions::default(),
            )?;
            ckpt.save(&out)?;
            println!(
                "pretrained: held-out accuracy {:.4}, checkpoint {}",
                ckpt.source_accuracy.unwrap_or(f64::NAN),
                out.display()
            );
        }
        Command::Stats {
            checkpoint,
            quantized,
            n_samples,
        } => {
            let out = cli.out.context("--out <stats.json> is required")?;
            let model = Checkpoint::load(&checkpoint)?.into_model()?;
            let (val, _) = generate_source(
                &config.task,
                n_samples,
                SeedStream::derive(base_seed, &[0x57a75]),
            )?;
            let stats = if quantized {
                let qmodel = quantize(&model, 8)?;
                estimate_source_stats(&qmodel, &[val])?
            } else {
                estimate_source_stats(&model, &[val])?
            };
            stats.save(&out)?;
            println!("source stats written to {}", out.display());
        }
        Command::Adapt {
            checkpoint,
            stats,
            schedule,
            arm,
            mode,
            quantized,
        } => {
            let out = cli.out.context("--out <metrics.csv> is required")?;
            let model = Checkpoint::load(&checkpoint)?.into_model()?;
            let stats = SourceStats::load(&stats)?;
            let arm = parse_arm(&arm)?;
            config.mode = parse_mode(&mode)?;
            config.schedule = schedule;
            config.quantized = quantized;
            let metrics = if quantized {
                let qmodel = quantize(&model, 8)?;
                run_arm(&qmodel, &stats, &config, arm, base_seed)?
            } else {
                run_arm(&model, &stats, &config, arm, base_seed)?
            };
            std::fs::write(&out, metrics_to_csv(&metrics))?;
            println!(
                "run complete: {} batches, mean accuracy {:.4}, metrics {}",
                metrics.len(),
                mean_accuracy(&metrics),
                out.display()
            );
        }
        Command::Experiment {
            checkpoint,
            stats,
            quant_stats,
        } => {
            let out = cli.out.context("--out <directory> is required")?;
            let model = Checkpoint::load(&checkpoint)?.into_model()?;
            let stats = SourceStats::load(&stats)?;
            let quant_stats = quant_stats.map(|p| SourceStats::load(&p)).transpose()?;
            let summary =
                run_experiment(&model, &stats, quant_stats.as_ref(), &config, &out)?;
            for arm in &summary.arms {
                println!(
                    "arm {:>9}: median mean-accuracy {:.4}, median AUC {:.4} over {} seeds",
                    arm.arm,
                    arm.median_mean_accuracy,
                    arm.median_auc,
                    arm.per_seed.len()
                );
            }
            println!("summary written to {}", out.join("summary.json").display());
        }
        Command::Diagnose { checkpoint, stats } => {
            let out = cli.out.context("--out <report.json> is required")?;
            let model = Checkpoint::load(&checkpoint)?.into_model()?;
            let stats = SourceStats::load(&stats)?;
            let opts = DiagnosticsOptions {
                seed: base_seed,
                ..DiagnosticsOptions::default()
            };
            let report = run_bias_variance_diagnostics(&model, &stats, &config.task, &opts)?;
            std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
            println!(
                "bias slope {:.4} (band {:?}): {}",
                report.bias_slope,
                report.bias_slope_band,
                if report.bias_pass { "pass" } else { "FAIL" }
            );
            println!(
                "variance ratio {:.3} (band {:?}): {}",
                report.variance_ratio,
                report.variance_band,
                if report.variance_pass { "pass" } else { "FAIL" }
            );
            println!(
                "error floor medians {:.5} (eps_min {}) vs {:.5} (eps_min {}): {}",
                report.floor_small_median,
                report.floor_eps_mins.0,
                report.floor_large_median,
                report.floor_eps_mins.1,
                if report.floor_pass { "pass" } else { "FAIL" }
            );
            println!("report written to {}", out.display());
        }
        Command::Quantize { checkpoint, bits } => {
            let out = cli.out.context("--out <report.json> is required")?;
            let model = Checkpoint::load(&checkpoint)?.into_model()?;
            let qmodel = quantize(&model, bits)?;

            // top-1 agreement with the float model on clean source batches
            let (val, _) = generate_source(
                &config.task,
                512,
                SeedStream::derive(base_seed, &[0x9a9e]),
            )?;
            let float_out = model.forward(&val)?;
            let quant_out = qmodel.forward(&val)?;
            let fp = predict(&float_out.logits)?;
            let qp = predict(&quant_out.logits)?;
            let agree = fp.iter().zip(&qp).filter(|(a, b)| a == b).count() as f64
                / fp.len() as f64;

            let report = QuantReport {
                bits,
                max_roundtrip_error_in_scale_units: qmodel.max_roundtrip_error(&model)?,
                clean_agreement: agree,
                float_weight_hash: format!("{:016x}", model.weight_hash()),
                quant_weight_hash: format!("{:016x}", qmodel.weight_hash()),
            };
            std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
            println!(
                "quantized: clean agreement {:.4}, report {}",
                agree,
                out.display()
            );
        }
    }
    Ok(())
}
