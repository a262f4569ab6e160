//! Synthetic source task and corrupted test streams.
//!
//! The source task draws each sample as a per-class prototype (one vector per
//! patch) plus Gaussian within-class noise. Test streams corrupt clean
//! samples with one of five corruption kinds at severities 1..=5 (0 is the
//! identity extension), arranged either as ordered domain segments (continual
//! protocol) or pooled and shuffled across domains (mixed protocol).

use crate::error::{FozoError, Result};
use crate::rng::SeedStream;
use crate::Tensor64;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Synthetic classification task parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub n_classes: usize,
    pub input_dim: usize,
    pub n_patches: usize,
    pub prototype_seed: u64,
    pub noise_scale: f64,
}

impl TaskSpec {
    /// Desk-scale defaults matching [`crate::ModelSpec::toy`].
    pub fn toy() -> Self {
        Self {
            n_classes: 8,
            input_dim: 12,
            n_patches: 16,
            prototype_seed: 7,
            noise_scale: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(FozoError::invalid("n_classes must be >= 2"));
        }
        if self.input_dim == 0 || self.n_patches == 0 {
            return Err(FozoError::invalid("input_dim and n_patches must be > 0"));
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return Err(FozoError::invalid("noise_scale must be finite and >= 0"));
        }
        Ok(())
    }

    /// Class prototypes, one `n_patches x input_dim` tensor per class,
    /// deterministic under `prototype_seed` and pairwise distinct.
    pub fn prototypes(&self) -> Result<Vec<Tensor64>> {
        self.validate()?;
        let mut s = SeedStream::new(SeedStream::derive(self.prototype_seed, &[0x70726f746f])); // "proto"
        let protos: Vec<Tensor64> = (0..self.n_classes)
            .map(|_| crate::rng::gaussian(&mut s, &[self.n_patches, self.input_dim]))
            .collect::<Result<_>>()?;
        for i in 0..protos.len() {
            for j in i + 1..protos.len() {
                if protos[i].data() == protos[j].data() {
                    return Err(FozoError::Internal(format!(
                        "prototypes {i} and {j} collide under seed {}",
                        self.prototype_seed
                    )));
                }
            }
        }
        Ok(protos)
    }
}

/// Clean source samples: prototype + within-class noise, label-balanced up to
/// rounding, deterministic under the seed.
pub fn generate_source(
    task: &TaskSpec,
    n_samples: usize,
    seed: u64,
) -> Result<(Tensor64, Vec<usize>)> {
    if n_samples == 0 {
        return Err(FozoError::invalid("n_samples must be >= 1"));
    }
    let protos = task.prototypes()?;
    let k = task.n_classes;

    let mut labels: Vec<usize> = (0..n_samples).map(|i| i % k).collect();
    SeedStream::new(SeedStream::derive(seed, &[0x6c61626c])).shuffle(&mut labels); // "labl"

    let mut noise = SeedStream::new(SeedStream::derive(seed, &[0x6e6f6973])); // "nois"
    let sample_len = task.n_patches * task.input_dim;
    let mut data = Vec::with_capacity(n_samples * sample_len);
    let mut buf = vec![0.0f64; sample_len];
    for &label in &labels {
        noise.fill_gaussian(&mut buf);
        let proto = protos[label].data();
        data.extend(
            proto
                .iter()
                .zip(buf.iter())
                .map(|(&p, &z)| p + task.noise_scale * z),
        );
    }
    let inputs = Tensor64::new(vec![n_samples, task.n_patches, task.input_dim], data)?;
    Ok((inputs, labels))
}

/// Corruption families. Each stresses a different model pathway: additive
/// noise, multiplicative scale, token permutation, affine intensity, masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    GaussianNoise,
    UniformScale,
    PatchShuffle,
    ContrastShift,
    OcclusionMask,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::UniformScale,
        CorruptionKind::PatchShuffle,
        CorruptionKind::ContrastShift,
        CorruptionKind::OcclusionMask,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian-noise",
            CorruptionKind::UniformScale => "uniform-scale",
            CorruptionKind::PatchShuffle => "patch-shuffle",
            CorruptionKind::ContrastShift => "contrast-shift",
            CorruptionKind::OcclusionMask => "occlusion-mask",
        }
    }
}

impl std::str::FromStr for CorruptionKind {
    type Err = FozoError;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .iter()
            .find(|k| k.name() == s)
            .copied()
            .ok_or_else(|| FozoError::invalid(format!("unknown corruption kind '{s}'")))
    }
}

impl std::fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A corruption kind at a severity level. Severity 0 is the identity
/// extension; 1..=5 are increasingly strong.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DomainSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl DomainSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if severity > 5 {
            return Err(FozoError::invalid(format!(
                "severity must be in 0..=5, got {severity}"
            )));
        }
        Ok(Self { kind, severity })
    }

    pub fn tag(&self) -> String {
        format!("{}-{}", self.kind, self.severity)
    }

    /// Distortion magnitude parameter at this severity. Strictly increasing
    /// in severity for every kind (the monotone-severity invariant).
    pub fn magnitude(&self) -> f64 {
        let s = self.severity as usize;
        match self.kind {
            CorruptionKind::GaussianNoise => GAUSSIAN_SIGMA[s],
            CorruptionKind::UniformScale => 1.0 - UNIFORM_SCALE[s],
            CorruptionKind::PatchShuffle => SHUFFLE_FRACTION[s],
            CorruptionKind::ContrastShift => (1.0 - CONTRAST_GAMMA[s]) + CONTRAST_DELTA[s],
            CorruptionKind::OcclusionMask => OCCLUDE_FRACTION[s],
        }
    }
}

// Severity-indexed magnitude tables (index 0 = identity). Calibrated so a
// severity-5 domain visibly degrades the pretrained toy model while leaving
// the class signal intact (a representation shift, not information
// destruction); the shrink direction is used for the scale corruption since
// layer normalization makes amplification nearly a no-op.
const GAUSSIAN_SIGMA: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];
const UNIFORM_SCALE: [f64; 6] = [1.0, 0.85, 0.7, 0.55, 0.42, 0.3];
const SHUFFLE_FRACTION: [f64; 6] = [0.0, 0.25, 0.45, 0.625, 0.8, 1.0];
const CONTRAST_GAMMA: [f64; 6] = [1.0, 0.92, 0.84, 0.76, 0.67, 0.575];
const CONTRAST_DELTA: [f64; 6] = [0.0, 0.08, 0.16, 0.24, 0.33, 0.425];
const OCCLUDE_FRACTION: [f64; 6] = [0.0, 0.05, 0.09, 0.13, 0.17, 0.21];

/// Apply a corruption to a `B x m x input_dim` batch. Deterministic under the
/// seed; output shape equals input shape; severity 0 returns the inputs
/// unchanged bit-exactly.
pub fn corrupt(inputs: &Tensor64, domain: &DomainSpec, seed: u64) -> Result<Tensor64> {
    if inputs.rank() != 3 {
        return Err(FozoError::shape(format!(
            "corrupt expects [B, m, input_dim], got {:?}",
            inputs.shape()
        )));
    }
    if domain.severity > 5 {
        return Err(FozoError::invalid(format!(
            "severity must be in 0..=5, got {}",
            domain.severity
        )));
    }
    if domain.severity == 0 {
        return Ok(inputs.clone());
    }
    let (b, m, dim) = (inputs.shape()[0], inputs.shape()[1], inputs.shape()[2]);
    let sev = domain.severity as usize;
    let sample_len = m * dim;
    let mut data = inputs.data().to_vec();

    for bi in 0..b {
        let mut s = SeedStream::new(SeedStream::derive(
            seed,
            &[domain.kind as u64, domain.severity as u64, bi as u64],
        ));
        let sample = &mut data[bi * sample_len..(bi + 1) * sample_len];
        match domain.kind {
            CorruptionKind::GaussianNoise => {
                let sigma = GAUSSIAN_SIGMA[sev];
                let mut noise = vec![0.0; sample_len];
                s.fill_gaussian(&mut noise);
                for (v, z) in sample.iter_mut().zip(noise.iter()) {
                    *v += sigma * z;
                }
            }
            CorruptionKind::UniformScale => {
                let factor = UNIFORM_SCALE[sev];
                for v in sample.iter_mut() {
                    *v *= factor;
                }
            }
            CorruptionKind::PatchShuffle => {
                let k = ((m as f64) * SHUFFLE_FRACTION[sev]).ceil() as usize;
                let k = k.min(m);
                let mut idx: Vec<usize> = (0..m).collect();
                s.shuffle(&mut idx);
                let chosen = &idx[..k];
                // rotate the chosen patches one position so the permutation
                // is derangement-like whenever k >= 2
                if k >= 2 {
                    let first = sample[chosen[0] * dim..(chosen[0] + 1) * dim].to_vec();
                    for w in 0..k - 1 {
                        let (src, dst) = (chosen[w + 1], chosen[w]);
                        let tmp = sample[src * dim..(src + 1) * dim].to_vec();
                        sample[dst * dim..(dst + 1) * dim].copy_from_slice(&tmp);
                    }
                    sample[chosen[k - 1] * dim..(chosen[k - 1] + 1) * dim].copy_from_slice(&first);
                }
            }
            CorruptionKind::ContrastShift => {
                let gamma = CONTRAST_GAMMA[sev];
                let delta = CONTRAST_DELTA[sev];
                let mean = sample.iter().sum::<f64>() / sample_len as f64;
                for v in sample.iter_mut() {
                    *v = gamma * (*v - mean) + mean + delta;
                }
            }
            CorruptionKind::OcclusionMask => {
                let k = ((m as f64) * OCCLUDE_FRACTION[sev]).ceil() as usize;
                let k = k.min(m);
                let mut idx: Vec<usize> = (0..m).collect();
                s.shuffle(&mut idx);
                for &p in &idx[..k] {
                    sample[p * dim..(p + 1) * dim].fill(0.0);
                }
            }
        }
    }
    Tensor64::new(vec![b, m, dim], data)
}

/// One contiguous run of a single domain in a continual schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub n_batches: usize,
    pub batch_size: usize,
}

impl Segment {
    pub fn domain(&self) -> DomainSpec {
        DomainSpec {
            kind: self.kind,
            severity: self.severity,
        }
    }
}

/// Ordered domain segments, or a pooled shuffle across domains.
#[derive(Debug, Clone, PartialEq)]
pub enum StreamSchedule {
    Continual(Vec<Segment>),
    Mixed {
        domains: Vec<DomainSpec>,
        budget: usize,
        batch_size: usize,
    },
}

/// On-disk schedule format: either `{"segments": [...]}` or
/// `{"mixed": true, "domains": [...], "budget": N, "batch_size": B}`.
#[derive(Debug, Default, Serialize, Deserialize)]
struct ScheduleFile {
    #[serde(default)]
    mixed: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    segments: Vec<Segment>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    domains: Vec<DomainSpec>,
    #[serde(default, skip_serializing_if = "is_zero")]
    budget: usize,
    #[serde(default, skip_serializing_if = "is_zero")]
    batch_size: usize,
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

impl StreamSchedule {
    /// Default desk-scale continual protocol: the five corruption kinds at
    /// severity 5, 20 batches of 64 each.
    pub fn default_continual() -> Self {
        StreamSchedule::Continual(
            CorruptionKind::ALL
                .iter()
                .map(|&kind| Segment {
                    kind,
                    severity: 5,
                    n_batches: 20,
                    batch_size: 64,
                })
                .collect(),
        )
    }

    /// Default mixed protocol: same five domains pooled into one shuffled
    /// stream with the same total sample budget.
    pub fn default_mixed() -> Self {
        StreamSchedule::Mixed {
            domains: CorruptionKind::ALL
                .iter()
                .map(|&kind| DomainSpec { kind, severity: 5 })
                .collect(),
            budget: 5 * 20 * 64,
            batch_size: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            StreamSchedule::Continual(segments) => {
                if segments.is_empty() {
                    return Err(FozoError::invalid("schedule has no segments"));
                }
                for seg in segments {
                    if seg.n_batches == 0 || seg.batch_size == 0 {
                        return Err(FozoError::invalid(
                            "segment n_batches and batch_size must be >= 1",
                        ));
                    }
                    if seg.severity > 5 {
                        return Err(FozoError::invalid("segment severity must be in 0..=5"));
                    }
                }
            }
            StreamSchedule::Mixed {
                domains,
                budget,
                batch_size,
            } => {
                if domains.is_empty() {
                    return Err(FozoError::invalid("mixed schedule has no domains"));
                }
                if *batch_size == 0 || *budget < *batch_size {
                    return Err(FozoError::invalid(
                        "mixed schedule needs budget >= batch_size >= 1",
                    ));
                }
                for d in domains {
                    if d.severity > 5 {
                        return Err(FozoError::invalid("domain severity must be in 0..=5"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn n_batches(&self) -> usize {
        match self {
            StreamSchedule::Continual(segs) => segs.iter().map(|s| s.n_batches).sum(),
            StreamSchedule::Mixed {
                budget, batch_size, ..
            } => budget / batch_size,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = match self {
            StreamSchedule::Continual(segments) => ScheduleFile {
                segments: segments.clone(),
                ..Default::default()
            },
            StreamSchedule::Mixed {
                domains,
                budget,
                batch_size,
            } => ScheduleFile {
                mixed: true,
                domains: domains.clone(),
                budget: *budget,
                batch_size: *batch_size,
                ..Default::default()
            },
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: ScheduleFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let schedule = if file.mixed {
            StreamSchedule::Mixed {
                domains: file.domains,
                budget: file.budget,
                batch_size: file.batch_size,
            }
        } else {
            StreamSchedule::Continual(file.segments)
        };
        schedule.validate()?;
        Ok(schedule)
    }
}

/// One stream element. The domain tag is carried for reporting only; mixed
/// batches (multiple domains pooled) carry no tag.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamBatch {
    pub inputs: Tensor64,
    pub labels: Vec<usize>,
    pub domain: Option<DomainSpec>,
}

/// Materialize a stream: continual mode emits segments in declared order;
/// mixed mode pools samples from all listed domains and shuffles them into
/// one stream. Deterministic under the seed and re-iterable.
pub fn build_stream(
    task: &TaskSpec,
    schedule: &StreamSchedule,
    seed: u64,
) -> Result<Vec<StreamBatch>> {
    schedule.validate()?;
    task.validate()?;
    let sample_len = task.n_patches * task.input_dim;
    match schedule {
        StreamSchedule::Continual(segments) => {
            let mut out = Vec::with_capacity(schedule.n_batches());
            for (si, seg) in segments.iter().enumerate() {
                let n = seg.n_batches * seg.batch_size;
                let (clean, labels) =
                    generate_source(task, n, SeedStream::derive(seed, &[1, si as u64]))?;
                let corrupted = corrupt(
                    &clean,
                    &seg.domain(),
                    SeedStream::derive(seed, &[2, si as u64]),
                )?;
                for bi in 0..seg.n_batches {
                    let lo = bi * seg.batch_size;
                    let hi = lo + seg.batch_size;
                    let inputs = Tensor64::new(
                        vec![seg.batch_size, task.n_patches, task.input_dim],
                        corrupted.data()[lo * sample_len..hi * sample_len].to_vec(),
                    )?;
                    out.push(StreamBatch {
                        inputs,
                        labels: labels[lo..hi].to_vec(),
                        domain: Some(seg.domain()),
                    });
                }
            }
            Ok(out)
        }
        StreamSchedule::Mixed {
            domains,
            budget,
            batch_size,
        } => {
            // split the budget as evenly as possible across domains
            let d = domains.len();
            let mut pool: Vec<(Vec<f64>, usize, DomainSpec)> = Vec::with_capacity(*budget);
            for (di, dom) in domains.iter().enumerate() {
                let share = budget / d + usize::from(di < budget % d);
                if share == 0 {
                    continue;
                }
                let (clean, labels) =
                    generate_source(task, share, SeedStream::derive(seed, &[3, di as u64]))?;
                let corrupted =
                    corrupt(&clean, dom, SeedStream::derive(seed, &[4, di as u64]))?;
                for i in 0..share {
                    pool.push((
                        corrupted.data()[i * sample_len..(i + 1) * sample_len].to_vec(),
                        labels[i],
                        *dom,
                    ));
                }
            }
            SeedStream::new(SeedStream::derive(seed, &[5])).shuffle(&mut pool);

            let single_domain = domains.len() == 1;
            let n_batches = budget / batch_size;
            let mut out = Vec::with_capacity(n_batches);
            for bi in 0..n_batches {
                let chunk = &pool[bi * batch_size..(bi + 1) * batch_size];
                let mut data = Vec::with_capacity(batch_size * sample_len);
                let mut labels = Vec::with_capacity(*batch_size);
                for (sample, label, _) in chunk {
                    data.extend_from_slice(sample);
                    labels.push(*label);
                }
                out.push(StreamBatch {
                    inputs: Tensor64::new(
                        vec![*batch_size, task.n_patches, task.input_dim],
                        data,
                    )?,
                    labels,
                    domain: single_domain.then(|| domains[0]),
                });
            }
            Ok(out)
        }
    }
}
