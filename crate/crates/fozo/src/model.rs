//! Frozen toy transformer with prompt injection and per-layer CLS taps.
//!
//! An N-layer pre-LN encoder over patch tokens, standing in for a large
//! vision transformer at desk scale. Learnable prompts are prepended to the
//! token sequence before layer 1 and propagate through the full depth; the
//! CLS activation is tapped after every layer for the statistics-alignment
//! loss. Weights are immutable after construction — adaptation touches only
//! the prompts.

use crate::error::{FozoError, Result};
use crate::rng::{self, SeedStream, GENERATOR_ID};
use crate::Tensor64;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// MLP hidden width as a multiple of the embedding dim (standard 4x).
pub const MLP_RATIO: usize = 4;

/// Architecture hyperparameters of the toy encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Number of encoder layers; must be even so the shallow/deep split is
    /// well defined.
    pub n_layers: usize,
    /// Token embedding dimension.
    pub embed_dim: usize,
    /// Attention heads; must divide `embed_dim`.
    pub n_heads: usize,
    /// Patches per sample.
    pub n_patches: usize,
    /// Output classes.
    pub n_classes: usize,
    /// Raw dimension of each input patch before embedding.
    pub input_dim: usize,
}

impl ModelSpec {
    /// Desk-scale defaults: 4 layers of width 16 with 2 heads, 16 patches,
    /// 8 classes.
    pub fn toy() -> Self {
        Self {
            n_layers: 4,
            embed_dim: 16,
            n_heads: 2,
            n_patches: 16,
            n_classes: 8,
            input_dim: 12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_layers % 2 != 0 {
            return Err(FozoError::invalid(format!(
                "n_layers must be positive and even, got {}",
                self.n_layers
            )));
        }
        if self.embed_dim == 0 || self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(FozoError::invalid(format!(
                "embed_dim {} must be divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.n_classes < 2 {
            return Err(FozoError::invalid("n_classes must be >= 2"));
        }
        if self.n_patches == 0 || self.input_dim == 0 {
            return Err(FozoError::invalid("n_patches and input_dim must be > 0"));
        }
        Ok(())
    }

    pub fn mlp_dim(&self) -> usize {
        MLP_RATIO * self.embed_dim
    }
}

/// One encoder layer's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub ln1_gamma: Tensor64,
    pub ln1_beta: Tensor64,
    pub wq: Tensor64,
    pub bq: Tensor64,
    pub wk: Tensor64,
    pub bk: Tensor64,
    pub wv: Tensor64,
    pub bv: Tensor64,
    pub wo: Tensor64,
    pub bo: Tensor64,
    pub ln2_gamma: Tensor64,
    pub ln2_beta: Tensor64,
    pub w1: Tensor64,
    pub b1: Tensor64,
    pub w2: Tensor64,
    pub b2: Tensor64,
}

/// Full parameter set of the toy encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub patch_w: Tensor64,
    pub patch_b: Tensor64,
    pub cls: Tensor64,
    /// Positional embeddings for CLS (row 0) and the m patches. Prompts carry
    /// no positional term.
    pub pos: Tensor64,
    pub layers: Vec<LayerWeights>,
    pub final_gamma: Tensor64,
    pub final_beta: Tensor64,
    pub head_w: Tensor64,
    pub head_b: Tensor64,
}

impl ModelWeights {
    /// Random initialization (gaussian 0.02 for matrices, identity layer
    /// norms, zero biases), deterministic under the seed.
    pub fn random_init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let d = spec.embed_dim;
        let h = spec.mlp_dim();
        let mut s = SeedStream::new(SeedStream::derive(seed, &[0x6d6f64656c])); // "model"
        let mut mat = |shape: &[usize]| -> Result<Tensor64> {
            rng::gaussian::<f64>(&mut s, shape)?.scale(0.02)
        };
        let mut layers = Vec::with_capacity(spec.n_layers);
        let patch_w = mat(&[spec.input_dim, d])?;
        let cls = mat(&[d])?;
        let pos = mat(&[spec.n_patches + 1, d])?;
        for _ in 0..spec.n_layers {
            layers.push(LayerWeights {
                ln1_gamma: Tensor64::scalar_filled(vec![d], 1.0)?,
                ln1_beta: Tensor64::zeros(vec![d]),
                wq: mat(&[d, d])?,
                bq: Tensor64::zeros(vec![d]),
                wk: mat(&[d, d])?,
                bk: Tensor64::zeros(vec![d]),
                wv: mat(&[d, d])?,
                bv: Tensor64::zeros(vec![d]),
                wo: mat(&[d, d])?,
                bo: Tensor64::zeros(vec![d]),
                ln2_gamma: Tensor64::scalar_filled(vec![d], 1.0)?,
                ln2_beta: Tensor64::zeros(vec![d]),
                w1: mat(&[d, h])?,
                b1: Tensor64::zeros(vec![h]),
                w2: mat(&[h, d])?,
                b2: Tensor64::zeros(vec![d]),
            });
        }
        Ok(Self {
            patch_w,
            patch_b: Tensor64::zeros(vec![d]),
            cls,
            pos,
            layers,
            final_gamma: Tensor64::scalar_filled(vec![d], 1.0)?,
            final_beta: Tensor64::zeros(vec![d]),
            head_w: mat(&[d, spec.n_classes])?,
            head_b: Tensor64::zeros(vec![spec.n_classes]),
        })
    }

    fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let d = spec.embed_dim;
        let h = spec.mlp_dim();
        let expect = |t: &Tensor64, shape: &[usize], name: &str| -> Result<()> {
            if t.shape() != shape {
                return Err(FozoError::shape(format!(
                    "{name}: expected {shape:?}, got {:?}",
                    t.shape()
                )));
            }
            t.check_finite(name)
        };
        expect(&self.patch_w, &[spec.input_dim, d], "patch_w")?;
        expect(&self.patch_b, &[d], "patch_b")?;
        expect(&self.cls, &[d], "cls")?;
        expect(&self.pos, &[spec.n_patches + 1, d], "pos")?;
        if self.layers.len() != spec.n_layers {
            return Err(FozoError::shape(format!(
                "expected {} layers, got {}",
                spec.n_layers,
                self.layers.len()
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let n = format!("layer {i}");
            expect(&l.ln1_gamma, &[d], &n)?;
            expect(&l.ln1_beta, &[d], &n)?;
            expect(&l.wq, &[d, d], &n)?;
            expect(&l.bq, &[d], &n)?;
            expect(&l.wk, &[d, d], &n)?;
            expect(&l.bk, &[d], &n)?;
            expect(&l.wv, &[d, d], &n)?;
            expect(&l.bv, &[d], &n)?;
            expect(&l.wo, &[d, d], &n)?;
            expect(&l.bo, &[d], &n)?;
            expect(&l.ln2_gamma, &[d], &n)?;
            expect(&l.ln2_beta, &[d], &n)?;
            expect(&l.w1, &[d, h], &n)?;
            expect(&l.b1, &[h], &n)?;
            expect(&l.w2, &[h, d], &n)?;
            expect(&l.b2, &[d], &n)?;
        }
        expect(&self.final_gamma, &[d], "final_gamma")?;
        expect(&self.final_beta, &[d], "final_beta")?;
        expect(&self.head_w, &[d, spec.n_classes], "head_w")?;
        expect(&self.head_b, &[spec.n_classes], "head_b")?;
        Ok(())
    }
}

/// Learnable prompt tokens, the only parameters updated at test time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    values: Tensor64,
}

impl PromptSet {
    /// Xavier-style uniform initialization in `[-r, r]` with
    /// `r = sqrt(6 / (d + d))`, deterministic under the seed.
    pub fn init_uniform(seed: u64, count: usize, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(FozoError::invalid("prompt dim must be > 0"));
        }
        if count == 0 {
            return Ok(Self::empty(dim));
        }
        let r = (6.0 / (2.0 * dim as f64)).sqrt();
        let mut s = SeedStream::new(SeedStream::derive(seed, &[0x70726f6d7074])); // "prompt"
        let values = rng::uniform::<f64>(&mut s, &[count, dim], -r, r)?;
        Ok(Self { values })
    }

    /// Zero prompts: forwarding with this set is bit-identical to the
    /// unprompted model.
    pub fn empty(dim: usize) -> Self {
        Self {
            values: Tensor64::zeros(vec![0, dim]),
        }
    }

    pub fn from_values(values: Tensor64) -> Result<Self> {
        if values.rank() != 2 {
            return Err(FozoError::shape(format!(
                "prompts must be rank-2 (count x dim), got {:?}",
                values.shape()
            )));
        }
        values.check_finite("prompt values")?;
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor64 {
        &self.values
    }

    pub fn count(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Model output: logits plus the CLS activation after every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `B x K`.
    pub logits: Tensor64,
    /// Exactly `n_layers` tensors of shape `B x d`.
    pub cls_per_layer: Vec<Tensor64>,
}

/// Per-row argmax; ties break toward the lowest class index.
pub fn predict(logits: &Tensor64) -> Result<Vec<usize>> {
    if logits.rank() != 2 || logits.cols() < 2 {
        return Err(FozoError::invalid(format!(
            "predict expects B x K logits with K >= 2, got {:?}",
            logits.shape()
        )));
    }
    let mut out = Vec::with_capacity(logits.rows());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Anything the adaptation engine can drive: a forward pass with prompts and
/// a content hash witnessing weight immutability.
pub trait PromptModel {
    fn forward_with_prompts(&self, prompts: &PromptSet, batch: &Tensor64) -> Result<ForwardOutput>;
    fn weight_hash(&self) -> u64;
    fn spec(&self) -> &ModelSpec;
}

/// Frozen float model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenModel {
    spec: ModelSpec,
    weights: ModelWeights,
}

impl FrozenModel {
    pub fn from_weights(spec: ModelSpec, weights: ModelWeights) -> Result<Self> {
        spec.validate()?;
        weights.validate(&spec)?;
        Ok(Self { spec, weights })
    }

    pub fn random_init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let weights = ModelWeights::random_init(&spec, seed)?;
        Ok(Self { spec, weights })
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    /// Forward pass without prompts (equivalent to an empty prompt set).
    pub fn forward(&self, batch: &Tensor64) -> Result<ForwardOutput> {
        self.forward_with_prompts(&PromptSet::empty(self.spec.embed_dim), batch)
    }

    fn view(&self) -> ModelView<'_, Tensor64> {
        let w = &self.weights;
        ModelView {
            spec: &self.spec,
            patch_w: &w.patch_w,
            patch_b: w.patch_b.data(),
            cls: w.cls.data(),
            pos: &w.pos,
            layers: w
                .layers
                .iter()
                .map(|l| LayerView {
                    ln1_gamma: l.ln1_gamma.data(),
                    ln1_beta: l.ln1_beta.data(),
                    wq: &l.wq,
                    bq: l.bq.data(),
                    wk: &l.wk,
                    bk: l.bk.data(),
                    wv: &l.wv,
                    bv: l.bv.data(),
                    wo: &l.wo,
                    bo: l.bo.data(),
                    ln2_gamma: l.ln2_gamma.data(),
                    ln2_beta: l.ln2_beta.data(),
                    w1: &l.w1,
                    b1: l.b1.data(),
                    w2: &l.w2,
                    b2: l.b2.data(),
                })
                .collect(),
            final_gamma: w.final_gamma.data(),
            final_beta: w.final_beta.data(),
            head_w: &w.head_w,
            head_b: w.head_b.data(),
        }
    }
}

impl PromptModel for FrozenModel {
    fn forward_with_prompts(&self, prompts: &PromptSet, batch: &Tensor64) -> Result<ForwardOutput> {
        forward_view(&self.view(), prompts, batch)
    }

    fn weight_hash(&self) -> u64 {
        let mut h = Fnv::new();
        hash_spec(&mut h, &self.spec);
        hash_weights(&mut h, &self.weights);
        h.finish()
    }

    fn spec(&self) -> &ModelSpec {
        &self.spec
    }
}

// --- checkpoint -------------------------------------------------------------

/// Versioned on-disk model format. Plain JSON numbers round-trip `f64` values
/// exactly (shortest-representation printing, correctly rounded parsing), so
/// loading a checkpoint reproduces the exact weight hash.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// RNG identity; seeds stored anywhere near this model replay only on
    /// this generator.
    pub generator: String,
    pub pretrain_seed: u64,
    /// Held-out source accuracy recorded at pretraining time, if any.
    pub source_accuracy: Option<f64>,
    pub spec: ModelSpec,
    pub weights: ModelWeights,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new(model: &FrozenModel, pretrain_seed: u64, source_accuracy: Option<f64>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            generator: GENERATOR_ID.to_string(),
            pretrain_seed,
            source_accuracy,
            spec: model.spec.clone(),
            weights: model.weights.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&json)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(FozoError::Unsupported(format!(
                "checkpoint version {} (expected {})",
                ckpt.version, CHECKPOINT_VERSION
            )));
        }
        if ckpt.generator != GENERATOR_ID {
            return Err(FozoError::Unsupported(format!(
                "checkpoint generator '{}' (expected '{}')",
                ckpt.generator, GENERATOR_ID
            )));
        }
        Ok(ckpt)
    }

    pub fn into_model(self) -> Result<FrozenModel> {
        FrozenModel::from_weights(self.spec, self.weights)
    }
}

// --- shared forward implementation ------------------------------------------
//
// The float and INT8 models run the exact same code, parameterized over how a
// weight matrix multiplies a vector. This keeps the two paths structurally
// identical: only the matrix kernels differ.

/// Row-vector × matrix kernel abstraction: `out[j] = sum_i x[i] * W[i, j]`.
pub(crate) trait Mat {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn apply(&self, x: &[f64], out: &mut [f64]);
}

impl Mat for Tensor64 {
    fn in_dim(&self) -> usize {
        self.shape()[0]
    }

    fn out_dim(&self) -> usize {
        self.shape()[1]
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let n = self.shape()[1];
        out.fill(0.0);
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.data()[i * n..(i + 1) * n];
            for (o, &w) in out.iter_mut().zip(row.iter()) {
                *o += xi * w;
            }
        }
    }
}

pub(crate) struct LayerView<'a, M> {
    pub ln1_gamma: &'a [f64],
    pub ln1_beta: &'a [f64],
    pub wq: &'a M,
    pub bq: &'a [f64],
    pub wk: &'a M,
    pub bk: &'a [f64],
    pub wv: &'a M,
    pub bv: &'a [f64],
    pub wo: &'a M,
    pub bo: &'a [f64],
    pub ln2_gamma: &'a [f64],
    pub ln2_beta: &'a [f64],
    pub w1: &'a M,
    pub b1: &'a [f64],
    pub w2: &'a M,
    pub b2: &'a [f64],
}

pub(crate) struct ModelView<'a, M> {
    pub spec: &'a ModelSpec,
    pub patch_w: &'a M,
    pub patch_b: &'a [f64],
    pub cls: &'a [f64],
    pub pos: &'a Tensor64,
    pub layers: Vec<LayerView<'a, M>>,
    pub final_gamma: &'a [f64],
    pub final_beta: &'a [f64],
    pub head_w: &'a M,
    pub head_b: &'a [f64],
}

const LN_EPS: f64 = 1e-12;

fn ln_rows_into(x: &[f64], rows: usize, d: usize, gamma: &[f64], beta: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..d {
            out[r * d + j] = gamma[j] * ((row[j] - mean) * inv) + beta[j];
        }
    }
}

fn linear_rows_into<M: Mat>(x: &[f64], rows: usize, w: &M, b: &[f64], out: &mut [f64]) {
    let (din, dout) = (w.in_dim(), w.out_dim());
    for r in 0..rows {
        let dst = &mut out[r * dout..(r + 1) * dout];
        w.apply(&x[r * din..(r + 1) * din], dst);
        for (o, &bv) in dst.iter_mut().zip(b.iter()) {
            *o += bv;
        }
    }
}

fn softmax_inplace(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// tanh-form GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn forward_view<M: Mat>(
    view: &ModelView<'_, M>,
    prompts: &PromptSet,
    batch: &Tensor64,
) -> Result<ForwardOutput> {
    let spec = view.spec;
    let (d, m, k, heads) = (
        spec.embed_dim,
        spec.n_patches,
        spec.n_classes,
        spec.n_heads,
    );
    if prompts.dim() != d {
        return Err(FozoError::shape(format!(
            "prompt dim {} vs embed dim {}",
            prompts.dim(),
            d
        )));
    }
    if batch.rank() != 3 || batch.shape()[1] != m || batch.shape()[2] != spec.input_dim {
        return Err(FozoError::shape(format!(
            "batch shape {:?}, expected [B, {}, {}]",
            batch.shape(),
            m,
            spec.input_dim
        )));
    }
    let b_sz = batch.shape()[0];
    if b_sz == 0 {
        return Err(FozoError::invalid("empty batch"));
    }

    let p = prompts.count();
    let seq = p + 1 + m;
    let cls_idx = p;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let hdim = spec.mlp_dim();

    let mut logits = vec![0.0; b_sz * k];
    let mut cls_taps = vec![vec![0.0; b_sz * d]; spec.n_layers];

    // per-sample scratch, reused across the batch
    let mut x = vec![0.0; seq * d];
    let mut a = vec![0.0; seq * d];
    let mut q = vec![0.0; seq * d];
    let mut kx = vec![0.0; seq * d];
    let mut v = vec![0.0; seq * d];
    let mut ctx = vec![0.0; seq * d];
    let mut o = vec![0.0; seq * d];
    let mut scores = vec![0.0; seq];
    let mut h1 = vec![0.0; seq * hdim];
    let mut h2 = vec![0.0; seq * d];
    let mut fin = vec![0.0; d];

    for bi in 0..b_sz {
        // token assembly: [prompts, CLS + pos0, embed(patch_j) + pos_{j+1}]
        x[..p * d].copy_from_slice(prompts.values().data());
        for j in 0..d {
            x[cls_idx * d + j] = view.cls[j] + view.pos.at2(0, j);
        }
        let sample = batch.plane(bi);
        for t in 0..m {
            let dst = &mut x[(p + 1 + t) * d..(p + 2 + t) * d];
            view.patch_w.apply(&sample[t * spec.input_dim..(t + 1) * spec.input_dim], dst);
            for j in 0..d {
                dst[j] += view.patch_b[j] + view.pos.at2(t + 1, j);
            }
        }

        for (li, layer) in view.layers.iter().enumerate() {
            // attention block
            ln_rows_into(&x, seq, d, layer.ln1_gamma, layer.ln1_beta, &mut a);
            linear_rows_into(&a, seq, layer.wq, layer.bq, &mut q);
            linear_rows_into(&a, seq, layer.wk, layer.bk, &mut kx);
            linear_rows_into(&a, seq, layer.wv, layer.bv, &mut v);
            for h in 0..heads {
                let off = h * dh;
                for ti in 0..seq {
                    for (tj, s) in scores.iter_mut().enumerate() {
                        let mut dot = 0.0;
                        for e in 0..dh {
                            dot += q[ti * d + off + e] * kx[tj * d + off + e];
                        }
                        *s = dot * scale;
                    }
                    softmax_inplace(&mut scores);
                    let dst = &mut ctx[ti * d + off..ti * d + off + dh];
                    dst.fill(0.0);
                    for (tj, &w) in scores.iter().enumerate() {
                        for e in 0..dh {
                            dst[e] += w * v[tj * d + off + e];
                        }
                    }
                }
            }
            linear_rows_into(&ctx, seq, layer.wo, layer.bo, &mut o);
            for (xv, ov) in x.iter_mut().zip(o.iter()) {
                *xv += ov;
            }

            // MLP block
            ln_rows_into(&x, seq, d, layer.ln2_gamma, layer.ln2_beta, &mut a);
            linear_rows_into(&a, seq, layer.w1, layer.b1, &mut h1);
            for hv in h1.iter_mut() {
                *hv = gelu(*hv);
            }
            linear_rows_into(&h1, seq, layer.w2, layer.b2, &mut h2);
            for (xv, hv) in x.iter_mut().zip(h2.iter()) {
                *xv += hv;
            }

            cls_taps[li][bi * d..(bi + 1) * d].copy_from_slice(&x[cls_idx * d..(cls_idx + 1) * d]);
        }

        // final norm + head on the CLS activation
        ln_rows_into(
            &x[cls_idx * d..(cls_idx + 1) * d],
            1,
            d,
            view.final_gamma,
            view.final_beta,
            &mut fin,
        );
        let dst = &mut logits[bi * k..(bi + 1) * k];
        view.head_w.apply(&fin, dst);
        for (lv, &hb) in dst.iter_mut().zip(view.head_b.iter()) {
            *lv += hb;
        }
    }

    let logits = Tensor64::new(vec![b_sz, k], logits)?;
    let cls_per_layer = cls_taps
        .into_iter()
        .map(|t| Tensor64::new(vec![b_sz, d], t))
        .collect::<Result<Vec<_>>>()?;
    Ok(ForwardOutput {
        logits,
        cls_per_layer,
    })
}

// --- weight hashing ----------------------------------------------------------

/// FNV-1a 64-bit, used as the weight content hash.
pub(crate) struct Fnv(u64);

impl Fnv {
    pub fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01B3);
        }
    }

    pub fn write_u64(&mut self, v: u64) {
        self.write(&v.to_le_bytes());
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

pub(crate) fn hash_tensor(h: &mut Fnv, t: &Tensor64) {
    h.write_u64(t.shape().len() as u64);
    for &e in t.shape() {
        h.write_u64(e as u64);
    }
    for &v in t.data() {
        h.write_u64(v.to_bits());
    }
}

fn hash_spec(h: &mut Fnv, spec: &ModelSpec) {
    for v in [
        spec.n_layers,
        spec.embed_dim,
        spec.n_heads,
        spec.n_patches,
        spec.n_classes,
        spec.input_dim,
    ] {
        h.write_u64(v as u64);
    }
}

pub(crate) fn hash_weights(h: &mut Fnv, w: &ModelWeights) {
    hash_tensor(h, &w.patch_w);
    hash_tensor(h, &w.patch_b);
    hash_tensor(h, &w.cls);
    hash_tensor(h, &w.pos);
    for l in &w.layers {
        for t in [
            &l.ln1_gamma,
            &l.ln1_beta,
            &l.wq,
            &l.bq,
            &l.wk,
            &l.bk,
            &l.wv,
            &l.bv,
            &l.wo,
            &l.bo,
            &l.ln2_gamma,
            &l.ln2_beta,
            &l.w1,
            &l.b1,
            &l.w2,
            &l.b2,
        ] {
            hash_tensor(h, t);
        }
    }
    hash_tensor(h, &w.final_gamma);
    hash_tensor(h, &w.final_beta);
    hash_tensor(h, &w.head_w);
    hash_tensor(h, &w.head_b);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::gaussian;

    fn toy_batch(spec: &ModelSpec, b: usize, seed: u64) -> Tensor64 {
        gaussian::<f64>(
            &mut SeedStream::new(seed),
            &[b, spec.n_patches, spec.input_dim],
        )
        .unwrap()
    }

    #[test]
    fn p0_equals_unprompted_bit_exact() {
        let spec = ModelSpec::toy();
        let model = FrozenModel::random_init(spec.clone(), 1).unwrap();
        let batch = toy_batch(&spec, 3, 2);
        let a = model.forward(&batch).unwrap();
        let b = model
            .forward_with_prompts(&PromptSet::empty(spec.embed_dim), &batch)
            .unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
        for (x, y) in a.cls_per_layer.iter().zip(b.cls_per_layer.iter()) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = ModelSpec::toy();
        let model = FrozenModel::random_init(spec.clone(), 5).unwrap();
        let prompts = PromptSet::init_uniform(7, 3, spec.embed_dim).unwrap();
        let batch = toy_batch(&spec, 4, 9);
        let a = model.forward_with_prompts(&prompts, &batch).unwrap();
        let b = model.forward_with_prompts(&prompts, &batch).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
    }

    #[test]
    fn cls_tap_count_and_shapes() {
        let spec = ModelSpec::toy();
        let model = FrozenModel::random_init(spec.clone(), 5).unwrap();
        let prompts = PromptSet::init_uniform(7, 3, spec.embed_dim).unwrap();
        let batch = toy_batch(&spec, 4, 9);
        let out = model.forward_with_prompts(&prompts, &batch).unwrap();
        assert_eq!(out.cls_per_layer.len(), spec.n_layers);
        for t in &out.cls_per_layer {
            assert_eq!(t.shape(), &[4, spec.embed_dim]);
        }
        assert_eq!(out.logits.shape(), &[4, spec.n_classes]);
    }

    #[test]
    fn logits_continuous_in_prompts() {
        // max-abs logit delta below 1e-6 for a prompt perturbation of norm 1e-8
        let spec = ModelSpec::toy();
        let model = FrozenModel::random_init(spec.clone(), 11).unwrap();
        let prompts = PromptSet::init_uniform(3, 3, spec.embed_dim).unwrap();
        let batch = toy_batch(&spec, 2, 13);
        let base = model.forward_with_prompts(&prompts, &batch).unwrap();

        let dir = gaussian::<f64>(&mut SeedStream::new(17), &[3, spec.embed_dim]).unwrap();
        let dir = dir.scale(1e-8 / dir.norm_l2()).unwrap();
        let moved = PromptSet::from_values(prompts.values().add(&dir).unwrap()).unwrap();
        let out = model.forward_with_prompts(&moved, &batch).unwrap();
        let max_delta = base
            .logits
            .data()
            .iter()
            .zip(out.logits.data().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_delta < 1e-6, "max logit delta {max_delta}");
    }

    #[test]
    fn prompt_locality() {
        let spec = ModelSpec::toy();
        let model = FrozenModel::random_init(spec.clone(), 5).unwrap();
        let hash_before = model.weight_hash();
        let batch = toy_batch(&spec, 2, 3);
        let a = model
            .forward_with_prompts(&PromptSet::init_uniform(1, 3, spec.embed_dim).unwrap(), &batch)
            .unwrap();
        let b = model
            .forward_with_prompts(&PromptSet::init_uniform(2, 3, spec.embed_dim).unwrap(), &batch)
            .unwrap();
        assert_ne!(a.logits.data(), b.logits.data());
        assert_eq!(model.weight_hash(), hash_before);
    }

    #[test]
    fn predict_argmax_and_tiebreak() {
        let logits = Tensor64::new(vec![1, 3], vec![0.1, 2.0, -1.0]).unwrap();
        assert_eq!(predict(&logits).unwrap(), vec![1]);
        let tied = Tensor64::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        assert_eq!(predict(&tied).unwrap(), vec![0]);
    }

    #[test]
    fn predict_shift_invariant() {
        let logits = Tensor64::new(vec![2, 3], vec![0.3, -0.2, 0.9, 1.0, 4.0, -2.0]).unwrap();
        let shifted = logits.map(|v| v + 17.5).unwrap();
        assert_eq!(predict(&logits).unwrap(), predict(&shifted).unwrap());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let spec = ModelSpec::toy();
        let model = FrozenModel::random_init(spec.clone(), 5).unwrap();
        let bad_prompts = PromptSet::init_uniform(1, 3, spec.embed_dim + 1).unwrap();
        let batch = toy_batch(&spec, 1, 3);
        assert!(model.forward_with_prompts(&bad_prompts, &batch).is_err());
        let bad_batch = gaussian::<f64>(
            &mut SeedStream::new(1),
            &[1, spec.n_patches + 1, spec.input_dim],
        )
        .unwrap();
        assert!(model.forward(&bad_batch).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_preserves_hash() {
        let spec = ModelSpec::toy();
        let model = FrozenModel::random_init(spec, 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        Checkpoint::new(&model, 21, Some(0.97)).save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap().into_model().unwrap();
        assert_eq!(loaded.weight_hash(), model.weight_hash());
    }

    #[test]
    fn spec_validation() {
        let mut spec = ModelSpec::toy();
        spec.n_layers = 3;
        assert!(spec.validate().is_err());
        let mut spec = ModelSpec::toy();
        spec.n_heads = 5;
        assert!(spec.validate().is_err());
    }
}
