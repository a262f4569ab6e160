//! Per-batch adaptation loop: scheduler step, n SPSA probes (2n forward
//! passes, no clean pass), seed-replay update, prediction selection, metrics.
//!
//! The loop is forward-only by construction — this module has no access to
//! any gradient facility — and never mutates model weights. In continual mode
//! the engine is never told where domain boundaries are; the domain tag on a
//! stream batch is copied into the metrics for reporting and nothing else.

use crate::error::{FozoError, Result};
use crate::losses::{total_loss, LossBreakdown, SourceStats};
use crate::model::{predict, PromptModel, PromptSet};
use crate::optimizer::{apply_updates, spsa_probe, EpsilonState, PerturbRecord};
use crate::rng::SeedStream;
use crate::stream::StreamBatch;
use crate::Tensor64;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Adaptation hyperparameters. Defaults follow the published tuning
/// (`eta = 0.08`, `alpha = 0.9`, `tau = 1.05`, `beta = 0.9`, `lambda = 0.4`,
/// one SPSA sample, three prompts); `eps0`/`eps_min` are desk-scale choices
/// exposed here because the published experiments do not state theirs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub eta: f64,
    pub n_spsa: usize,
    pub n_prompts: usize,
    pub eps0: f64,
    pub eps_min: f64,
    pub alpha: f64,
    pub tau: f64,
    pub beta: f64,
    pub lambda: f64,
    pub seed: u64,
    /// Per-batch multiplicative learning-rate decay (1.0 = constant eta).
    pub eta_decay: f64,
    /// Freeze the perturbation scale at `eps0` (the fixed-ε baseline arm).
    pub fixed_eps: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            eta: 0.08,
            n_spsa: 1,
            n_prompts: 3,
            eps0: 1e-2,
            eps_min: 1e-3,
            alpha: 0.9,
            tau: 1.05,
            beta: 0.9,
            lambda: 0.4,
            seed: 0,
            eta_decay: 1.0,
            fixed_eps: false,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(FozoError::invalid(format!("eta must be >= 0, got {}", self.eta)));
        }
        if self.n_spsa == 0 {
            return Err(FozoError::invalid("n_spsa must be >= 1"));
        }
        if !(self.lambda >= 0.0) {
            return Err(FozoError::invalid("lambda must be >= 0"));
        }
        if !(self.eta_decay > 0.0 && self.eta_decay <= 1.0) {
            return Err(FozoError::invalid("eta_decay must be in (0, 1]"));
        }
        // scheduler constants validated by EpsilonState
        EpsilonState::new(self.eps0, self.eps_min, self.alpha, self.tau, self.beta)?;
        Ok(())
    }

    /// Override one config key from its string form (the CLI `--set` path).
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_f64 = |v: &str| -> Result<f64> {
            v.parse()
                .map_err(|_| FozoError::invalid(format!("'{v}' is not a number")))
        };
        let parse_usize = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| FozoError::invalid(format!("'{v}' is not an integer")))
        };
        match key {
            "eta" => self.eta = parse_f64(value)?,
            "n_spsa" => self.n_spsa = parse_usize(value)?,
            "n_prompts" => self.n_prompts = parse_usize(value)?,
            "eps0" => self.eps0 = parse_f64(value)?,
            "eps_min" => self.eps_min = parse_f64(value)?,
            "alpha" => self.alpha = parse_f64(value)?,
            "tau" => self.tau = parse_f64(value)?,
            "beta" => self.beta = parse_f64(value)?,
            "lambda" => self.lambda = parse_f64(value)?,
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| FozoError::invalid(format!("'{value}' is not a seed")))?
            }
            "eta_decay" => self.eta_decay = parse_f64(value)?,
            "fixed_eps" => {
                self.fixed_eps = value
                    .parse()
                    .map_err(|_| FozoError::invalid(format!("'{value}' is not a bool")))?
            }
            other => {
                return Err(FozoError::invalid(format!("unknown config key '{other}'")));
            }
        }
        self.validate()
    }
}

/// One forward pass's loss breakdown and predictions, kept for prediction
/// selection.
#[derive(Debug, Clone, PartialEq)]
pub struct PassEval {
    pub loss: LossBreakdown,
    pub predictions: Vec<usize>,
}

/// Pick the pass with the lowest total loss; ties (and the all-NaN edge)
/// resolve to the first-encountered pass. NaN losses order after every finite
/// value, so a finite pass always wins over a failed one.
pub fn select_predictions(candidates: &[PassEval]) -> Result<&PassEval> {
    if candidates.is_empty() {
        return Err(FozoError::invalid("select_predictions: no candidates"));
    }
    let mut best = &candidates[0];
    for c in &candidates[1..] {
        if c.loss.total.total_cmp(&best.loss.total) == std::cmp::Ordering::Less {
            best = c;
        }
    }
    Ok(best)
}

/// Per-batch metrics row. `fp_count` counts model forward passes actually
/// executed for the batch (always `2 * n_spsa` on the adaptation path).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMetrics {
    pub t: usize,
    pub domain: Option<String>,
    pub loss_total: f64,
    pub loss_ent: f64,
    pub loss_stats: f64,
    pub eps: f64,
    pub reset: bool,
    pub acc: Option<f64>,
    pub fp_count: usize,
    pub wall_ms: f64,
    /// True when every probe failed and the update was skipped.
    pub skipped: bool,
}

/// How [`run_stream`] treats declared domain boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    /// Carry prompts and scheduler state across boundaries; the engine never
    /// learns where they are.
    Continual,
    /// Reinitialize prompts and scheduler state at each declared boundary
    /// (convergence-curve experiments only).
    ResetOnSwitch,
}

/// An adaptation run over one frozen model: prompts, scheduler state, and
/// bookkeeping. The model reference is immutable; a weight hash is taken at
/// construction and can be re-checked at any time.
pub struct AdaptSession<'a> {
    model: &'a dyn PromptModel,
    config: AdaptConfig,
    stats: SourceStats,
    prompts: PromptSet,
    initial_prompts: PromptSet,
    eps: EpsilonState,
    eta_t: f64,
    t: usize,
    prev_batch_loss: Option<f64>,
    forward_count: u64,
    initial_weight_hash: u64,
}

impl<'a> AdaptSession<'a> {
    pub fn new(
        model: &'a dyn PromptModel,
        stats: SourceStats,
        config: AdaptConfig,
    ) -> Result<Self> {
        config.validate()?;
        stats.validate()?;
        if stats.embed_dim != model.spec().embed_dim {
            return Err(FozoError::shape(format!(
                "source stats dim {} vs model embed dim {}",
                stats.embed_dim,
                model.spec().embed_dim
            )));
        }
        let prompts =
            PromptSet::init_uniform(config.seed, config.n_prompts, model.spec().embed_dim)?;
        let eps = EpsilonState::new(
            config.eps0,
            config.eps_min,
            config.alpha,
            config.tau,
            config.beta,
        )?;
        Ok(Self {
            model,
            eta_t: config.eta,
            config,
            stats,
            initial_prompts: prompts.clone(),
            prompts,
            eps,
            t: 0,
            prev_batch_loss: None,
            forward_count: 0,
            initial_weight_hash: model.weight_hash(),
        })
    }

    pub fn config(&self) -> &AdaptConfig {
        &self.config
    }

    pub fn prompts(&self) -> &PromptSet {
        &self.prompts
    }

    pub fn epsilon(&self) -> f64 {
        self.eps.eps_t
    }

    pub fn step_count(&self) -> usize {
        self.t
    }

    /// Total model forward passes executed so far.
    pub fn forward_count(&self) -> u64 {
        self.forward_count
    }

    pub fn initial_weight_hash(&self) -> u64 {
        self.initial_weight_hash
    }

    /// Check the frozen guarantee right now.
    pub fn weights_unchanged(&self) -> bool {
        self.model.weight_hash() == self.initial_weight_hash
    }

    /// Reinitialize prompts, scheduler, and learning rate (reset-on-switch
    /// boundaries). The step counter keeps increasing.
    pub fn reset_adaptation_state(&mut self) {
        self.prompts = self.initial_prompts.clone();
        self.eps = self.eps.reinitialized();
        self.eta_t = self.config.eta;
        self.prev_batch_loss = None;
    }

    /// Adapt on one batch and predict every sample in it.
    ///
    /// Runs the scheduler on the previous batch's loss signal (the listing
    /// adjusts ε before any loss of the current batch exists), then n probes
    /// (2n forwards, no clean pass), then the seed-replay update, then
    /// prediction selection. Deterministic given session state, batch, and
    /// seed.
    pub fn adapt_batch(
        &mut self,
        batch: &Tensor64,
        labels: Option<&[usize]>,
    ) -> Result<(Vec<usize>, BatchMetrics)> {
        let started = Instant::now();
        self.t += 1;

        if !self.config.fixed_eps {
            if let Some(signal) = self.prev_batch_loss {
                self.eps.step(signal)?;
            }
        }

        let n = self.config.n_spsa;
        let mut passes: Vec<PassEval> = Vec::with_capacity(2 * n);
        let mut records: Vec<PerturbRecord> = Vec::with_capacity(n);

        for j in 0..n {
            let probe_seed = SeedStream::derive(self.config.seed, &[self.t as u64, j as u64]);
            let result = {
                let model = self.model;
                let stats = &self.stats;
                let lambda = self.config.lambda;
                let forward_count = &mut self.forward_count;
                let passes = &mut passes;
                let mut eval = |p: &PromptSet| -> Result<(f64, Vec<usize>)> {
                    let out = model.forward_with_prompts(p, batch)?;
                    *forward_count += 1;
                    let loss = total_loss(&out.logits, &out.cls_per_layer, stats, lambda)?;
                    let predictions = predict(&out.logits)?;
                    passes.push(PassEval {
                        loss,
                        predictions: predictions.clone(),
                    });
                    Ok((loss.total, predictions))
                };
                spsa_probe(&mut eval, &self.prompts, self.eps.eps_t, probe_seed)
            };
            match result {
                Ok(probe) => records.push(probe.record),
                Err(FozoError::ProbeFailure { .. }) => {
                    // the failed probe's passes stay in the candidate pool;
                    // its record is discarded so it cannot poison the update
                }
                Err(other) => return Err(other),
            }
        }

        let skipped = records.is_empty();
        if !skipped {
            self.prompts = apply_updates(&self.prompts, &records, self.eta_t)?;
        }
        self.eta_t *= self.config.eta_decay;

        let selected = select_predictions(&passes)?;
        let predictions = selected.predictions.clone();

        // scheduler signal for the next batch: total loss averaged over the
        // finite passes of this one
        let finite: Vec<&PassEval> = passes.iter().filter(|p| p.loss.total.is_finite()).collect();
        if !finite.is_empty() {
            self.prev_batch_loss =
                Some(finite.iter().map(|p| p.loss.total).sum::<f64>() / finite.len() as f64);
        }

        let mean_of = |f: &dyn Fn(&PassEval) -> f64| -> f64 {
            if finite.is_empty() {
                f64::NAN
            } else {
                finite.iter().map(|p| f(p)).sum::<f64>() / finite.len() as f64
            }
        };
        let acc = labels.map(|ls| {
            let correct = predictions
                .iter()
                .zip(ls.iter())
                .filter(|(p, l)| p == l)
                .count();
            correct as f64 / ls.len() as f64
        });

        let metrics = BatchMetrics {
            t: self.t,
            domain: None,
            loss_total: mean_of(&|p| p.loss.total),
            loss_ent: mean_of(&|p| p.loss.entropy),
            loss_stats: mean_of(&|p| p.loss.stats),
            eps: self.eps.eps_t,
            reset: self.eps.last_reset,
            acc,
            fp_count: 2 * n,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            skipped,
        };
        Ok((predictions, metrics))
    }
}

/// Drive a session over a materialized stream.
///
/// Continual mode ignores domain tags entirely (they are copied into the
/// metrics afterwards); reset-on-switch reinitializes the adaptation state
/// whenever the declared tag changes.
pub fn run_stream(
    session: &mut AdaptSession<'_>,
    stream: &[StreamBatch],
    mode: RunMode,
) -> Result<Vec<BatchMetrics>> {
    if stream.is_empty() {
        return Err(FozoError::invalid("run_stream: empty stream"));
    }
    let mut out = Vec::with_capacity(stream.len());
    let mut last_domain = None;
    for sb in stream {
        if mode == RunMode::ResetOnSwitch {
            if last_domain.is_some() && sb.domain != last_domain {
                session.reset_adaptation_state();
            }
            last_domain = sb.domain;
        }
        let (_, mut metrics) = session.adapt_batch(&sb.inputs, Some(&sb.labels))?;
        metrics.domain = sb.domain.map(|d| d.tag());
        out.push(metrics);
    }
    Ok(out)
}

/// Clean pass-through evaluation (one forward per batch, no perturbation,
/// no update): the plain no-adapt reference arm.
pub fn evaluate_stream(
    model: &dyn PromptModel,
    prompts: &PromptSet,
    stats: &SourceStats,
    lambda: f64,
    stream: &[StreamBatch],
) -> Result<Vec<BatchMetrics>> {
    if stream.is_empty() {
        return Err(FozoError::invalid("evaluate_stream: empty stream"));
    }
    let mut out = Vec::with_capacity(stream.len());
    for (i, sb) in stream.iter().enumerate() {
        let started = Instant::now();
        let fo = model.forward_with_prompts(prompts, &sb.inputs)?;
        let loss = total_loss(&fo.logits, &fo.cls_per_layer, stats, lambda)?;
        let predictions = predict(&fo.logits)?;
        let correct = predictions
            .iter()
            .zip(sb.labels.iter())
            .filter(|(p, l)| p == l)
            .count();
        out.push(BatchMetrics {
            t: i + 1,
            domain: sb.domain.map(|d| d.tag()),
            loss_total: loss.total,
            loss_ent: loss.entropy,
            loss_stats: loss.stats,
            eps: 0.0,
            reset: false,
            acc: Some(correct as f64 / sb.labels.len().max(1) as f64),
            fp_count: 1,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            skipped: false,
        });
    }
    Ok(out)
}

/// Metrics CSV header. The `wall_ms` column is timing telemetry and the one
/// column excluded from byte-for-byte determinism comparisons.
pub const METRICS_CSV_HEADER: &str =
    "t,domain,loss_total,loss_ent,loss_stats,eps,reset,acc,fp_count,wall_ms,skipped";

/// Schema version line written above the header.
pub const METRICS_CSV_VERSION: &str = "# fozo-metrics v1";

/// Render metrics as CSV (version comment + header + one row per batch).
pub fn metrics_to_csv(metrics: &[BatchMetrics]) -> String {
    let mut out = String::new();
    out.push_str(METRICS_CSV_VERSION);
    out.push('\n');
    out.push_str(METRICS_CSV_HEADER);
    out.push('\n');
    for m in metrics {
        let acc = m.acc.map(|a| a.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            m.t,
            m.domain.as_deref().unwrap_or(""),
            m.loss_total,
            m.loss_ent,
            m.loss_stats,
            m.eps,
            m.reset,
            acc,
            m.fp_count,
            m.wall_ms,
            m.skipped
        ));
    }
    out
}

/// Parse a metrics CSV produced by [`metrics_to_csv`].
pub fn metrics_from_csv(csv: &str) -> Result<Vec<BatchMetrics>> {
    let mut lines = csv.lines();
    match lines.next() {
        Some(v) if v == METRICS_CSV_VERSION => {}
        other => {
            return Err(FozoError::invalid(format!(
                "unexpected metrics version line: {other:?}"
            )))
        }
    }
    match lines.next() {
        Some(h) if h == METRICS_CSV_HEADER => {}
        other => {
            return Err(FozoError::invalid(format!(
                "unexpected metrics header: {other:?}"
            )))
        }
    }
    let mut out = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 11 {
            return Err(FozoError::invalid(format!(
                "metrics row {} has {} fields",
                ln + 3,
                fields.len()
            )));
        }
        let bad = |what: &str| FozoError::invalid(format!("metrics row {}: bad {what}", ln + 3));
        out.push(BatchMetrics {
            t: fields[0].parse().map_err(|_| bad("t"))?,
            domain: (!fields[1].is_empty()).then(|| fields[1].to_string()),
            loss_total: fields[2].parse().map_err(|_| bad("loss_total"))?,
            loss_ent: fields[3].parse().map_err(|_| bad("loss_ent"))?,
            loss_stats: fields[4].parse().map_err(|_| bad("loss_stats"))?,
            eps: fields[5].parse().map_err(|_| bad("eps"))?,
            reset: fields[6].parse().map_err(|_| bad("reset"))?,
            acc: if fields[7].is_empty() {
                None
            } else {
                Some(fields[7].parse().map_err(|_| bad("acc"))?)
            },
            fp_count: fields[8].parse().map_err(|_| bad("fp_count"))?,
            wall_ms: fields[9].parse().map_err(|_| bad("wall_ms"))?,
            skipped: fields[10].parse().map_err(|_| bad("skipped"))?,
        });
    }
    Ok(out)
}

/// Mean accuracy over rows that carry one.
pub fn mean_accuracy(metrics: &[BatchMetrics]) -> f64 {
    let accs: Vec<f64> = metrics.iter().filter_map(|m| m.acc).collect();
    if accs.is_empty() {
        return f64::NAN;
    }
    accs.iter().sum::<f64>() / accs.len() as f64
}

/// Area under the accuracy-vs-batch curve (trapezoid rule over batch index,
/// normalized to the [0, 1] accuracy scale).
pub fn accuracy_auc(metrics: &[BatchMetrics]) -> f64 {
    let accs: Vec<f64> = metrics.iter().filter_map(|m| m.acc).collect();
    if accs.len() < 2 {
        return accs.first().copied().unwrap_or(f64::NAN);
    }
    let mut area = 0.0;
    for w in accs.windows(2) {
        area += 0.5 * (w[0] + w[1]);
    }
    area / (accs.len() - 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::estimate_source_stats;
    use crate::model::{FrozenModel, ModelSpec};
    use crate::stream::{build_stream, generate_source, StreamSchedule, TaskSpec};

    fn fixture() -> (FrozenModel, SourceStats, Vec<StreamBatch>) {
        let spec = ModelSpec::toy();
        let task = TaskSpec::toy();
        let model = FrozenModel::random_init(spec.clone(), 3).unwrap();
        let (inputs, _) = generate_source(&task, 64, 100).unwrap();
        let stats = estimate_source_stats(&model, &[inputs]).unwrap();
        let schedule = StreamSchedule::Continual(vec![crate::stream::Segment {
            kind: crate::stream::CorruptionKind::GaussianNoise,
            severity: 3,
            n_batches: 4,
            batch_size: 16,
        }]);
        let stream = build_stream(&task, &schedule, 5).unwrap();
        (model, stats, stream)
    }

    #[test]
    fn fp_accounting_is_exactly_2n() {
        let (model, stats, stream) = fixture();
        for n in [1usize, 3] {
            let config = AdaptConfig {
                n_spsa: n,
                ..AdaptConfig::default()
            };
            let mut session = AdaptSession::new(&model, stats.clone(), config).unwrap();
            let metrics = run_stream(&mut session, &stream, RunMode::Continual).unwrap();
            assert_eq!(
                session.forward_count(),
                (2 * n * stream.len()) as u64
            );
            assert!(metrics.iter().all(|m| m.fp_count == 2 * n));
        }
    }

    #[test]
    fn zero_eta_leaves_prompts_bit_exact() {
        let (model, stats, stream) = fixture();
        let config = AdaptConfig {
            eta: 0.0,
            ..AdaptConfig::default()
        };
        let mut session = AdaptSession::new(&model, stats, config).unwrap();
        let before = session.prompts().values().clone();
        let _ = run_stream(&mut session, &stream, RunMode::Continual).unwrap();
        assert_eq!(session.prompts().values().data(), before.data());
    }

    #[test]
    fn weights_frozen_through_run() {
        let (model, stats, stream) = fixture();
        let mut session = AdaptSession::new(&model, stats, AdaptConfig::default()).unwrap();
        let _ = run_stream(&mut session, &stream, RunMode::Continual).unwrap();
        assert!(session.weights_unchanged());
    }

    #[test]
    fn deterministic_metrics_modulo_wall_time() {
        let (model, stats, stream) = fixture();
        let run = || {
            let mut session =
                AdaptSession::new(&model, stats.clone(), AdaptConfig::default()).unwrap();
            run_stream(&mut session, &stream, RunMode::Continual).unwrap()
        };
        let (a, b) = (run(), run());
        for (x, y) in a.iter().zip(b.iter()) {
            let mut x = x.clone();
            let mut y = y.clone();
            x.wall_ms = 0.0;
            y.wall_ms = 0.0;
            assert_eq!(x, y);
        }
    }

    #[test]
    fn continual_mode_ignores_domain_tags() {
        let (model, stats, stream) = fixture();
        let stripped: Vec<StreamBatch> = stream
            .iter()
            .map(|sb| StreamBatch {
                inputs: sb.inputs.clone(),
                labels: sb.labels.clone(),
                domain: None,
            })
            .collect();
        let run = |s: &[StreamBatch]| {
            let mut session =
                AdaptSession::new(&model, stats.clone(), AdaptConfig::default()).unwrap();
            run_stream(&mut session, s, RunMode::Continual).unwrap()
        };
        let (tagged, untagged) = (run(&stream), run(&stripped));
        for (x, y) in tagged.iter().zip(untagged.iter()) {
            assert_eq!(x.loss_total, y.loss_total);
            assert_eq!(x.acc, y.acc);
            assert_eq!(x.eps, y.eps);
        }
    }

    #[test]
    fn single_domain_reset_equals_continual() {
        let (model, stats, stream) = fixture();
        let run = |mode: RunMode| {
            let mut session =
                AdaptSession::new(&model, stats.clone(), AdaptConfig::default()).unwrap();
            run_stream(&mut session, &stream, mode).unwrap()
        };
        let (a, b) = (run(RunMode::Continual), run(RunMode::ResetOnSwitch));
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.loss_total, y.loss_total);
            assert_eq!(x.acc, y.acc);
        }
    }

    #[test]
    fn reset_mode_restarts_eps_at_boundaries() {
        let (model, stats, _) = fixture();
        let task = TaskSpec::toy();
        let schedule = StreamSchedule::Continual(vec![
            crate::stream::Segment {
                kind: crate::stream::CorruptionKind::GaussianNoise,
                severity: 4,
                n_batches: 5,
                batch_size: 8,
            },
            crate::stream::Segment {
                kind: crate::stream::CorruptionKind::OcclusionMask,
                severity: 4,
                n_batches: 5,
                batch_size: 8,
            },
        ]);
        let stream = build_stream(&task, &schedule, 9).unwrap();
        let mut session = AdaptSession::new(&model, stats, AdaptConfig::default()).unwrap();
        let metrics = run_stream(&mut session, &stream, RunMode::ResetOnSwitch).unwrap();
        // first batch of each segment runs at eps0
        assert_eq!(metrics[0].eps, session.config().eps0);
        assert_eq!(metrics[5].eps, session.config().eps0);
        // decay happened inside the first segment
        assert!(metrics[4].eps < session.config().eps0);
    }

    #[test]
    fn select_predictions_lowest_loss_and_ties() {
        let mk = |total: f64, pred: usize| PassEval {
            loss: LossBreakdown {
                stats: 0.0,
                entropy: total,
                total,
                lambda: 0.4,
            },
            predictions: vec![pred],
        };
        let probes = vec![mk(2.0, 1), mk(2.5, 2)];
        assert_eq!(select_predictions(&probes).unwrap().predictions, vec![1]);
        let tied = vec![mk(1.0, 7), mk(1.0, 8)];
        assert_eq!(select_predictions(&tied).unwrap().predictions, vec![7]);
        let single = vec![mk(0.3, 4)];
        assert_eq!(select_predictions(&single).unwrap().predictions, vec![4]);
        let with_nan = vec![mk(f64::NAN, 1), mk(9.0, 2)];
        assert_eq!(select_predictions(&with_nan).unwrap().predictions, vec![2]);
    }

    #[test]
    fn csv_rendering_includes_schema() {
        let (model, stats, stream) = fixture();
        let mut session = AdaptSession::new(&model, stats, AdaptConfig::default()).unwrap();
        let metrics = run_stream(&mut session, &stream[..2], RunMode::Continual).unwrap();
        let csv = metrics_to_csv(&metrics);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(METRICS_CSV_VERSION));
        assert_eq!(lines.next(), Some(METRICS_CSV_HEADER));
        assert_eq!(lines.count(), 2);
    }

    #[test]
    fn csv_roundtrip_reproduces_metrics() {
        let (model, stats, stream) = fixture();
        let mut session = AdaptSession::new(&model, stats, AdaptConfig::default()).unwrap();
        let metrics = run_stream(&mut session, &stream, RunMode::Continual).unwrap();
        let parsed = metrics_from_csv(&metrics_to_csv(&metrics)).unwrap();
        assert_eq!(parsed, metrics);
        assert_eq!(mean_accuracy(&parsed), mean_accuracy(&metrics));
    }

    #[test]
    fn evaluate_stream_is_one_forward_per_batch() {
        let (model, stats, stream) = fixture();
        let prompts = PromptSet::empty(model.spec().embed_dim);
        let metrics = evaluate_stream(&model, &prompts, &stats, 0.4, &stream).unwrap();
        assert!(metrics.iter().all(|m| m.fp_count == 1));
        assert_eq!(metrics.len(), stream.len());
    }

    #[test]
    fn set_key_roundtrip() {
        let mut cfg = AdaptConfig::default();
        cfg.set_key("eta", "0.05").unwrap();
        cfg.set_key("n_spsa", "4").unwrap();
        cfg.set_key("fixed_eps", "true").unwrap();
        assert_eq!(cfg.eta, 0.05);
        assert_eq!(cfg.n_spsa, 4);
        assert!(cfg.fixed_eps);
        assert!(cfg.set_key("bogus", "1").is_err());
        assert!(cfg.set_key("eta", "-1").is_err());
    }
}
