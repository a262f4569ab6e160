//! Unsupervised adaptation objective: prediction entropy plus deep-shallow
//! feature-statistics alignment.
//!
//! CLS activations are grouped into shallow (layers `1..N/2`) and deep
//! (layers `N/2+1..N`) halves. For each group the activations are pooled over
//! batch and layers jointly, per-dimension mean and population std are taken,
//! and their L2 distances to pre-computed source statistics are summed.
//! Entropy is summed (not averaged) over the batch; the default trade-off
//! weight `lambda = 0.4` was tuned against that convention at batch size 64,
//! so the two defaults travel together.

use crate::error::{FozoError, Result};
use crate::model::{PromptModel, PromptSet};
use crate::Tensor64;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Default trade-off weight between the statistics and entropy terms.
pub const DEFAULT_LAMBDA: f64 = 0.4;

pub const SOURCE_STATS_VERSION: u32 = 1;

/// Per-group (shallow/deep) per-dimension mean and std of source-domain CLS
/// activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceStats {
    pub version: u32,
    pub embed_dim: usize,
    pub mu_shallow: Tensor64,
    pub sigma_shallow: Tensor64,
    pub mu_deep: Tensor64,
    pub sigma_deep: Tensor64,
}

impl SourceStats {
    pub fn validate(&self) -> Result<()> {
        let d = self.embed_dim;
        for (name, t) in [
            ("mu_shallow", &self.mu_shallow),
            ("sigma_shallow", &self.sigma_shallow),
            ("mu_deep", &self.mu_deep),
            ("sigma_deep", &self.sigma_deep),
        ] {
            if t.shape() != [d] {
                return Err(FozoError::shape(format!(
                    "{name}: expected [{d}], got {:?}",
                    t.shape()
                )));
            }
            t.check_finite(name)?;
        }
        if self
            .sigma_shallow
            .data()
            .iter()
            .chain(self.sigma_deep.data())
            .any(|&v| v < 0.0)
        {
            return Err(FozoError::invalid("sigma entries must be >= 0"));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let stats: SourceStats = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if stats.version != SOURCE_STATS_VERSION {
            return Err(FozoError::Unsupported(format!(
                "source stats version {} (expected {})",
                stats.version, SOURCE_STATS_VERSION
            )));
        }
        stats.validate()?;
        Ok(stats)
    }
}

/// The three loss components of one evaluation. `total` is exactly
/// `lambda * stats + entropy` as computed in f64.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub stats: f64,
    pub entropy: f64,
    pub total: f64,
    pub lambda: f64,
}

/// Batch prediction entropy, summed over samples:
/// `-sum_i sum_a p_ia log p_ia` with `p = softmax(logits)` and `0 log 0 = 0`.
pub fn entropy_loss(logits: &Tensor64) -> Result<f64> {
    if logits.rank() != 2 || logits.rows() < 1 || logits.cols() < 2 {
        return Err(FozoError::invalid(format!(
            "entropy_loss expects B x K logits with B >= 1, K >= 2, got {:?}",
            logits.shape()
        )));
    }
    logits.check_finite("entropy_loss logits")?;
    let (b, k) = (logits.rows(), logits.cols());
    let mut total = 0.0;
    for i in 0..b {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in row {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        let mut h = 0.0;
        for j in 0..k {
            let logp = row[j] - lse;
            let p = logp.exp();
            if p > 0.0 {
                h -= p * logp;
            }
        }
        total += h;
    }
    Ok(total)
}

/// Pool a layer range of CLS activations into one `(rows x d)` matrix, rows
/// ordered layer-major then batch. Both the loss and the estimator use this
/// helper so their pooling conventions cannot drift apart.
fn pool_group(cls_per_layer: &[Tensor64], range: std::ops::Range<usize>) -> Result<Tensor64> {
    let d = cls_per_layer[0].cols();
    let b = cls_per_layer[0].rows();
    let mut data = Vec::with_capacity(range.len() * b * d);
    for li in range {
        let t = &cls_per_layer[li];
        if t.shape() != [b, d] {
            return Err(FozoError::shape(format!(
                "cls activations must share shape [{b}, {d}], layer {li} has {:?}",
                t.shape()
            )));
        }
        data.extend_from_slice(t.data());
    }
    Tensor64::new(vec![data.len() / d, d], data)
}

fn group_mean_std(pooled: &Tensor64) -> Result<(Tensor64, Tensor64)> {
    Ok((pooled.mean_axis0()?, pooled.std_axis0()?))
}

fn l2_diff(a: &Tensor64, b: &Tensor64) -> Result<f64> {
    Ok(a.sub(b)?.norm_l2())
}

/// Deep-shallow alignment loss: for each group, the L2 distance of pooled
/// per-dimension means and stds to the source statistics, summed over groups.
pub fn stats_alignment_loss(cls_per_layer: &[Tensor64], source: &SourceStats) -> Result<f64> {
    let n = cls_per_layer.len();
    if n == 0 || n % 2 != 0 {
        return Err(FozoError::invalid(format!(
            "stats_alignment_loss needs an even, positive layer count, got {n}"
        )));
    }
    source.validate()?;
    if cls_per_layer[0].cols() != source.embed_dim {
        return Err(FozoError::shape(format!(
            "activation dim {} vs source stats dim {}",
            cls_per_layer[0].cols(),
            source.embed_dim
        )));
    }
    let half = n / 2;
    let (mu_s, sig_s) = group_mean_std(&pool_group(cls_per_layer, 0..half)?)?;
    let (mu_d, sig_d) = group_mean_std(&pool_group(cls_per_layer, half..n)?)?;
    Ok(l2_diff(&mu_s, &source.mu_shallow)?
        + l2_diff(&sig_s, &source.sigma_shallow)?
        + l2_diff(&mu_d, &source.mu_deep)?
        + l2_diff(&sig_d, &source.sigma_deep)?)
}

/// Combined objective `lambda * stats + entropy`.
pub fn total_loss(
    logits: &Tensor64,
    cls_per_layer: &[Tensor64],
    source: &SourceStats,
    lambda: f64,
) -> Result<LossBreakdown> {
    if !(lambda >= 0.0) {
        return Err(FozoError::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    let stats = stats_alignment_loss(cls_per_layer, source)?;
    let entropy = entropy_loss(logits)?;
    Ok(LossBreakdown {
        stats,
        entropy,
        total: lambda * stats + entropy,
        lambda,
    })
}

/// Estimate source statistics by running unprompted forwards over clean
/// source batches and pooling per-group CLS activations across all of them.
pub fn estimate_source_stats<M: PromptModel + ?Sized>(
    model: &M,
    source_batches: &[Tensor64],
) -> Result<SourceStats> {
    if source_batches.is_empty() {
        return Err(FozoError::invalid(
            "estimate_source_stats needs at least one batch",
        ));
    }
    let spec = model.spec();
    let d = spec.embed_dim;
    let n = spec.n_layers;
    let empty = PromptSet::empty(d);

    // all per-layer activations pooled over every batch
    let mut per_layer: Vec<Vec<f64>> = vec![Vec::new(); n];
    for batch in source_batches {
        let out = model.forward_with_prompts(&empty, batch)?;
        for (li, t) in out.cls_per_layer.iter().enumerate() {
            per_layer[li].extend_from_slice(t.data());
        }
    }
    let tensors = per_layer
        .into_iter()
        .map(|data| Tensor64::new(vec![data.len() / d, d], data))
        .collect::<Result<Vec<_>>>()?;

    let half = n / 2;
    let (mu_shallow, sigma_shallow) = group_mean_std(&pool_group(&tensors, 0..half)?)?;
    let (mu_deep, sigma_deep) = group_mean_std(&pool_group(&tensors, half..n)?)?;
    let stats = SourceStats {
        version: SOURCE_STATS_VERSION,
        embed_dim: d,
        mu_shallow,
        sigma_shallow,
        mu_deep,
        sigma_deep,
    };
    stats.validate()?;
    Ok(stats)
}

/// Source stats computed directly from a list of per-layer activations
/// (shared pooling path, used by tests and the self-alignment shortcut).
pub fn stats_from_activations(cls_per_layer: &[Tensor64]) -> Result<SourceStats> {
    let n = cls_per_layer.len();
    if n == 0 || n % 2 != 0 {
        return Err(FozoError::invalid("need an even, positive layer count"));
    }
    let d = cls_per_layer[0].cols();
    let half = n / 2;
    let (mu_shallow, sigma_shallow) = group_mean_std(&pool_group(cls_per_layer, 0..half)?)?;
    let (mu_deep, sigma_deep) = group_mean_std(&pool_group(cls_per_layer, half..n)?)?;
    let stats = SourceStats {
        version: SOURCE_STATS_VERSION,
        embed_dim: d,
        mu_shallow,
        sigma_shallow,
        mu_deep,
        sigma_deep,
    };
    stats.validate()?;
    Ok(stats)
}
