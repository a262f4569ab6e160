//! Experiment orchestration: (arm × seed) runs, per-run metrics CSVs, and a
//! summary JSON recomputable from the CSVs alone.

use crate::{HarnessError, Result};
use fozo::model::FrozenModel;
use fozo::quant::quantize;
use fozo::stream::{build_stream, StreamSchedule, TaskSpec};
use fozo::{
    accuracy_auc, evaluate_stream, mean_accuracy, metrics_to_csv, run_stream, AdaptConfig,
    AdaptSession, BatchMetrics, PromptModel, PromptSet, RunMode, SourceStats,
};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Comparison arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    /// Full method: dynamic perturbation schedule.
    Dynamic,
    /// Fixed-ε baseline at the same forward-pass budget.
    Fixed,
    /// Clean pass-through evaluation (one forward per batch, no probes).
    NoAdapt,
    /// Perturbed probes with `eta = 0`: prompts never move, FP budget matches
    /// the adaptation arms.
    ZeroEta,
}

impl Arm {
    pub fn name(&self) -> &'static str {
        match self {
            Arm::Dynamic => "dynamic",
            Arm::Fixed => "fixed",
            Arm::NoAdapt => "no-adapt",
            Arm::ZeroEta => "zero-eta",
        }
    }
}

/// Stream protocol for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentMode {
    Continual,
    ResetOnSwitch,
    Mixed,
}

/// Full experiment description. Loaded from JSON; every field has a default
/// so partial configs are fine.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub model: fozo::ModelSpec,
    /// Path to a schedule JSON; when absent the default protocol for `mode`
    /// is used.
    pub schedule: Option<PathBuf>,
    pub mode: ExperimentMode,
    pub adapt: AdaptConfig,
    pub arms: Vec<Arm>,
    pub seeds: Vec<u64>,
    /// Run every arm on the INT8 model instead of the float one.
    pub quantized: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec::toy(),
            model: fozo::ModelSpec::toy(),
            schedule: None,
            mode: ExperimentMode::Continual,
            adapt: AdaptConfig::default(),
            arms: vec![Arm::Dynamic, Arm::NoAdapt],
            seeds: vec![1, 2, 3, 4, 5],
            quantized: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.arms.is_empty() {
            return Err(HarnessError::InvalidConfig("no arms configured".into()));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::InvalidConfig("no seeds configured".into()));
        }
        self.adapt.validate()?;
        self.task.validate()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_schedule(&self) -> Result<StreamSchedule> {
        match (&self.schedule, self.mode) {
            (Some(path), _) => Ok(StreamSchedule::load(path)?),
            (None, ExperimentMode::Mixed) => Ok(StreamSchedule::default_mixed()),
            (None, _) => Ok(StreamSchedule::default_continual()),
        }
    }

    pub fn run_mode(&self) -> RunMode {
        match self.mode {
            ExperimentMode::ResetOnSwitch => RunMode::ResetOnSwitch,
            _ => RunMode::Continual,
        }
    }
}

/// Per-seed result of one arm.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub mean_accuracy: f64,
    pub auc: f64,
    pub forward_passes: u64,
    pub n_batches: usize,
    pub resets: usize,
    pub wall_ms: f64,
    pub csv: String,
}

/// Aggregate over seeds for one arm.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub per_seed: Vec<SeedSummary>,
    pub median_mean_accuracy: f64,
    pub median_auc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub mode: ExperimentMode,
    pub quantized: bool,
    pub arms: Vec<ArmSummary>,
}

impl ExperimentSummary {
    pub fn arm(&self, name: &str) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.arm == name)
    }
}

fn summarize(seed: u64, metrics: &[BatchMetrics], csv_name: &str) -> SeedSummary {
    SeedSummary {
        seed,
        mean_accuracy: mean_accuracy(metrics),
        auc: accuracy_auc(metrics),
        forward_passes: metrics.iter().map(|m| m.fp_count as u64).sum(),
        n_batches: metrics.len(),
        resets: metrics.iter().filter(|m| m.reset).count(),
        wall_ms: metrics.iter().map(|m| m.wall_ms).sum(),
        csv: csv_name.to_string(),
    }
}

/// Run one arm over one seeded stream.
pub fn run_arm(
    model: &dyn PromptModel,
    stats: &SourceStats,
    config: &ExperimentConfig,
    arm: Arm,
    seed: u64,
) -> Result<Vec<BatchMetrics>> {
    let schedule = config.resolve_schedule()?;
    let stream = build_stream(&config.task, &schedule, seed)?;
    let metrics = match arm {
        Arm::NoAdapt => {
            let prompts = PromptSet::empty(model.spec().embed_dim);
            evaluate_stream(model, &prompts, stats, config.adapt.lambda, &stream)?
        }
        _ => {
            let adapt = match arm {
                Arm::Dynamic => AdaptConfig {
                    seed,
                    fixed_eps: false,
                    ..config.adapt.clone()
                },
                Arm::Fixed => AdaptConfig {
                    seed,
                    fixed_eps: true,
                    ..config.adapt.clone()
                },
                Arm::ZeroEta => AdaptConfig {
                    seed,
                    eta: 0.0,
                    ..config.adapt.clone()
                },
                Arm::NoAdapt => unreachable!(),
            };
            let mut session = AdaptSession::new(model, stats.clone(), adapt)?;
            let metrics = run_stream(&mut session, &stream, config.run_mode())?;
            if !session.weights_unchanged() {
                return Err(HarnessError::InvalidConfig(
                    "model weights changed during adaptation".into(),
                ));
            }
            metrics
        }
    };
    Ok(metrics)
}

/// Run every (arm × seed), writing one CSV per run plus `summary.json`.
pub fn run_experiment(
    model_float: &FrozenModel,
    stats_float: &SourceStats,
    stats_quant: Option<&SourceStats>,
    config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<ExperimentSummary> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;

    let quant_model;
    let (model, stats): (&dyn PromptModel, &SourceStats) = if config.quantized {
        quant_model = quantize(model_float, 8)?;
        (
            &quant_model,
            stats_quant.ok_or_else(|| {
                HarnessError::InvalidConfig(
                    "quantized experiment needs stats estimated on the quantized model".into(),
                )
            })?,
        )
    } else {
        (model_float, stats_float)
    };

    let mut arms = Vec::with_capacity(config.arms.len());
    for &arm in &config.arms {
        let mut per_seed = Vec::with_capacity(config.seeds.len());
        for &seed in &config.seeds {
            let metrics = run_arm(model, stats, config, arm, seed)?;
            let csv_name = format!("run_{}_{}.csv", arm.name(), seed);
            std::fs::write(out_dir.join(&csv_name), metrics_to_csv(&metrics))?;
            per_seed.push(summarize(seed, &metrics, &csv_name));
        }
        let accs: Vec<f64> = per_seed.iter().map(|s| s.mean_accuracy).collect();
        let aucs: Vec<f64> = per_seed.iter().map(|s| s.auc).collect();
        arms.push(ArmSummary {
            arm: arm.name().to_string(),
            median_mean_accuracy: crate::diagnostics::median(&accs),
            median_auc: crate::diagnostics::median(&aucs),
            per_seed,
        });
    }

    let summary = ExperimentSummary {
        mode: config.mode,
        quantized: config.quantized,
        arms,
    };
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use fozo::estimate_source_stats;
    use fozo::model::ModelSpec;
    use fozo::stream::generate_source;

    #[test]
    fn no_adapt_arm_equals_direct_evaluation() {
        let task = TaskSpec::toy();
        let model = FrozenModel::random_init(ModelSpec::toy(), 2).unwrap();
        let (val, _) = generate_source(&task, 64, 99).unwrap();
        let stats = estimate_source_stats(&model, &[val]).unwrap();
        let config = ExperimentConfig {
            arms: vec![Arm::NoAdapt],
            seeds: vec![4],
            ..Default::default()
        };
        let metrics = run_arm(&model, &stats, &config, Arm::NoAdapt, 4).unwrap();

        // direct evaluation of the frozen model over the same stream
        let schedule = config.resolve_schedule().unwrap();
        let stream = build_stream(&task, &schedule, 4).unwrap();
        let mut correct = 0usize;
        let mut total = 0usize;
        for sb in &stream {
            let out = model.forward(&sb.inputs).unwrap();
            let preds = fozo::predict(&out.logits).unwrap();
            correct += preds.iter().zip(&sb.labels).filter(|(p, l)| p == l).count();
            total += sb.labels.len();
        }
        let direct = correct as f64 / total as f64;
        let per_batch: f64 = mean_accuracy(&metrics);
        // equal-size batches: the batch-mean of accuracies equals the pooled
        // accuracy
        assert!((per_batch - direct).abs() < 1e-12);
    }

    #[test]
    fn identical_config_twice_identical_csvs() {
        let task = TaskSpec::toy();
        let model = FrozenModel::random_init(ModelSpec::toy(), 2).unwrap();
        let (val, _) = generate_source(&task, 64, 99).unwrap();
        let stats = estimate_source_stats(&model, &[val]).unwrap();
        let config = ExperimentConfig {
            arms: vec![Arm::Dynamic],
            seeds: vec![7],
            schedule: None,
            mode: ExperimentMode::Continual,
            ..Default::default()
        };
        // small stream for speed
        let mut cfg = config;
        let dir = tempfile::tempdir().unwrap();
        let sched_path = dir.path().join("sched.json");
        StreamSchedule::Continual(vec![fozo::Segment {
            kind: fozo::CorruptionKind::GaussianNoise,
            severity: 4,
            n_batches: 3,
            batch_size: 16,
        }])
        .save(&sched_path)
        .unwrap();
        cfg.schedule = Some(sched_path);

        let a = run_arm(&model, &stats, &cfg, Arm::Dynamic, 7).unwrap();
        let b = run_arm(&model, &stats, &cfg, Arm::Dynamic, 7).unwrap();
        let strip = |csv: &str| -> String {
            // drop the wall_ms column (timing telemetry)
            csv.lines()
                .map(|l| {
                    let f: Vec<&str> = l.split(',').collect();
                    if f.len() == 11 {
                        format!("{},{}", f[..9].join(","), f[10])
                    } else {
                        l.to_string()
                    }
                })
                .collect::<Vec<_>>()
                .join("\n")
        };
        assert_eq!(strip(&metrics_to_csv(&a)), strip(&metrics_to_csv(&b)));
    }
}
