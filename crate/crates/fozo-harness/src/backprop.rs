//! Reference backprop trainer for the toy encoder.
//!
//! Offline only: this trainer produces the frozen source checkpoint and never
//! appears on the adaptation path (the `fozo` crate cannot reach it). The
//! forward pass mirrors the model's op order exactly; gradients are analytic
//! and validated against central finite differences in the tests.

use crate::HarnessError;
use fozo::model::{LayerWeights, ModelSpec, ModelWeights};
use fozo::{SeedStream, Tensor64};

type Result<T> = std::result::Result<T, HarnessError>;

const LN_EPS: f64 = 1e-12;

/// Flat parameter blocks in the canonical checkpoint order.
#[derive(Debug, Clone)]
pub struct Params {
    pub spec: ModelSpec,
    pub blocks: Vec<Vec<f64>>,
}

/// Block layout per layer: ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo,
/// ln2_g, ln2_b, w1, b1, w2, b2.
const LAYER_BLOCKS: usize = 16;
// global blocks before the layers: patch_w, patch_b, cls, pos
const PATCH_W: usize = 0;
const PATCH_B: usize = 1;
const CLS: usize = 2;
const POS: usize = 3;
const LAYER0: usize = 4;

impl Params {
    fn tail(spec: &ModelSpec) -> usize {
        LAYER0 + spec.n_layers * LAYER_BLOCKS
    }

    fn block_shapes(spec: &ModelSpec) -> Vec<Vec<usize>> {
        let d = spec.embed_dim;
        let h = spec.mlp_dim();
        let mut shapes = vec![
            vec![spec.input_dim, d],
            vec![d],
            vec![d],
            vec![spec.n_patches + 1, d],
        ];
        for _ in 0..spec.n_layers {
            shapes.extend_from_slice(&[
                vec![d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d],
                vec![d],
                vec![d, h],
                vec![h],
                vec![h, d],
                vec![d],
            ]);
        }
        shapes.extend_from_slice(&[
            vec![d],
            vec![d],
            vec![d, spec.n_classes],
            vec![spec.n_classes],
        ]);
        shapes
    }

    pub fn from_weights(spec: &ModelSpec, w: &ModelWeights) -> Self {
        let mut blocks = vec![
            w.patch_w.data().to_vec(),
            w.patch_b.data().to_vec(),
            w.cls.data().to_vec(),
            w.pos.data().to_vec(),
        ];
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
                blocks.push(t.data().to_vec());
            }
        }
        blocks.push(w.final_gamma.data().to_vec());
        blocks.push(w.final_beta.data().to_vec());
        blocks.push(w.head_w.data().to_vec());
        blocks.push(w.head_b.data().to_vec());
        Self {
            spec: spec.clone(),
            blocks,
        }
    }

    pub fn to_weights(&self) -> Result<ModelWeights> {
        let shapes = Self::block_shapes(&self.spec);
        let tensor = |i: usize| -> Result<Tensor64> {
            Ok(Tensor64::new(shapes[i].clone(), self.blocks[i].clone())?)
        };
        let mut layers = Vec::with_capacity(self.spec.n_layers);
        for li in 0..self.spec.n_layers {
            let b = LAYER0 + li * LAYER_BLOCKS;
            layers.push(LayerWeights {
                ln1_gamma: tensor(b)?,
                ln1_beta: tensor(b + 1)?,
                wq: tensor(b + 2)?,
                bq: tensor(b + 3)?,
                wk: tensor(b + 4)?,
                bk: tensor(b + 5)?,
                wv: tensor(b + 6)?,
                bv: tensor(b + 7)?,
                wo: tensor(b + 8)?,
                bo: tensor(b + 9)?,
                ln2_gamma: tensor(b + 10)?,
                ln2_beta: tensor(b + 11)?,
                w1: tensor(b + 12)?,
                b1: tensor(b + 13)?,
                w2: tensor(b + 14)?,
                b2: tensor(b + 15)?,
            });
        }
        let tail = Self::tail(&self.spec);
        Ok(ModelWeights {
            patch_w: tensor(PATCH_W)?,
            patch_b: tensor(PATCH_B)?,
            cls: tensor(CLS)?,
            pos: tensor(POS)?,
            layers,
            final_gamma: tensor(tail)?,
            final_beta: tensor(tail + 1)?,
            head_w: tensor(tail + 2)?,
            head_b: tensor(tail + 3)?,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            blocks: self.blocks.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).sum()
    }

    fn layer(&self, li: usize, off: usize) -> &[f64] {
        &self.blocks[LAYER0 + li * LAYER_BLOCKS + off]
    }
}

// --- forward with caches ------------------------------------------------------

struct LayerCache {
    x_in: Vec<f64>,
    a1: Vec<f64>,
    ln1_stats: Vec<(f64, f64)>, // (mean, inv_std) per row
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>, // heads x seq x seq
    ctx: Vec<f64>,
    x_mid: Vec<f64>,
    a2: Vec<f64>,
    ln2_stats: Vec<(f64, f64)>,
    h_pre: Vec<f64>,
    h_act: Vec<f64>,
}

struct SampleCache {
    layers: Vec<LayerCache>,
    x_out_cls: Vec<f64>,
    fin_stats: (f64, f64),
    fin: Vec<f64>,
    logits: Vec<f64>,
    probs_out: Vec<f64>,
}

fn ln_forward(
    x: &[f64],
    rows: usize,
    d: usize,
    gamma: &[f64],
    beta: &[f64],
    out: &mut [f64],
    stats: &mut Vec<(f64, f64)>,
) {
    stats.clear();
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        stats.push((mean, inv));
        for j in 0..d {
            out[r * d + j] = gamma[j] * ((row[j] - mean) * inv) + beta[j];
        }
    }
}

/// LayerNorm backward for one row. `xhat[j] = (x[j]-mean)*inv`.
#[allow(clippy::too_many_arguments)]
fn ln_backward_row(
    dy: &[f64],
    x: &[f64],
    mean: f64,
    inv: f64,
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
    dx: &mut [f64],
) {
    let d = dy.len();
    let mut sum_dxhat = 0.0;
    let mut sum_dxhat_xhat = 0.0;
    for j in 0..d {
        let xhat = (x[j] - mean) * inv;
        let dxhat = dy[j] * gamma[j];
        dgamma[j] += dy[j] * xhat;
        dbeta[j] += dy[j];
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat;
    }
    let n = d as f64;
    for j in 0..d {
        let xhat = (x[j] - mean) * inv;
        let dxhat = dy[j] * gamma[j];
        dx[j] = inv * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
    }
}

fn linear_fwd(x: &[f64], rows: usize, w: &[f64], b: &[f64], din: usize, dout: usize, out: &mut [f64]) {
    for r in 0..rows {
        let dst = &mut out[r * dout..(r + 1) * dout];
        dst.copy_from_slice(b);
        for i in 0..din {
            let xi = x[r * din + i];
            let wrow = &w[i * dout..(i + 1) * dout];
            for (o, &wv) in dst.iter_mut().zip(wrow) {
                *o += xi * wv;
            }
        }
    }
}

/// Backward of `out = x W + b`: accumulates `dW`, `db`, writes `dx`.
#[allow(clippy::too_many_arguments)]
fn linear_bwd(
    x: &[f64],
    rows: usize,
    w: &[f64],
    din: usize,
    dout: usize,
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
) {
    dx[..rows * din].fill(0.0);
    for r in 0..rows {
        let dyr = &dy[r * dout..(r + 1) * dout];
        for (j, &g) in dyr.iter().enumerate() {
            db[j] += g;
        }
        for i in 0..din {
            let xi = x[r * din + i];
            let wrow = &w[i * dout..(i + 1) * dout];
            let dwrow = &mut dw[i * dout..(i + 1) * dout];
            let mut acc = 0.0;
            for j in 0..dout {
                dwrow[j] += xi * dyr[j];
                acc += wrow[j] * dyr[j];
            }
            dx[r * din + i] = acc;
        }
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * A * x * x)
}

/// Forward one sample with optional prompt tokens prepended (token order
/// matches the frozen model: prompts, CLS, patches), returning logits and
/// caches. Prompt rows are inputs, not parameters — no gradient flows into
/// them.
fn forward_sample(params: &Params, sample: &[f64], prompt_rows: &[f64]) -> SampleCache {
    let spec = &params.spec;
    let (d, m, heads) = (spec.embed_dim, spec.n_patches, spec.n_heads);
    let n_prompts = prompt_rows.len() / d.max(1);
    let seq = n_prompts + m + 1;
    let cls_idx = n_prompts;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let hdim = spec.mlp_dim();

    let patch_w = &params.blocks[PATCH_W];
    let patch_b = &params.blocks[PATCH_B];
    let cls = &params.blocks[CLS];
    let pos = &params.blocks[POS];

    let mut x = vec![0.0; seq * d];
    x[..n_prompts * d].copy_from_slice(prompt_rows);
    for j in 0..d {
        x[cls_idx * d + j] = cls[j] + pos[j];
    }
    for t in 0..m {
        let dst = &mut x[(cls_idx + 1 + t) * d..(cls_idx + 2 + t) * d];
        dst.copy_from_slice(patch_b);
        for i in 0..spec.input_dim {
            let xi = sample[t * spec.input_dim + i];
            let wrow = &patch_w[i * d..(i + 1) * d];
            for (o, &wv) in dst.iter_mut().zip(wrow) {
                *o += xi * wv;
            }
        }
        for j in 0..d {
            dst[j] += pos[(t + 1) * d + j];
        }
    }

    let mut layers = Vec::with_capacity(spec.n_layers);
    for li in 0..spec.n_layers {
        let x_in = x.clone();
        let mut a1 = vec![0.0; seq * d];
        let mut ln1_stats = Vec::new();
        ln_forward(
            &x_in,
            seq,
            d,
            params.layer(li, 0),
            params.layer(li, 1),
            &mut a1,
            &mut ln1_stats,
        );
        let mut q = vec![0.0; seq * d];
        let mut k = vec![0.0; seq * d];
        let mut v = vec![0.0; seq * d];
        linear_fwd(&a1, seq, params.layer(li, 2), params.layer(li, 3), d, d, &mut q);
        linear_fwd(&a1, seq, params.layer(li, 4), params.layer(li, 5), d, d, &mut k);
        linear_fwd(&a1, seq, params.layer(li, 6), params.layer(li, 7), d, d, &mut v);

        let mut probs = vec![0.0; heads * seq * seq];
        let mut ctx = vec![0.0; seq * d];
        for h in 0..heads {
            let off = h * dh;
            for ti in 0..seq {
                let row = &mut probs[(h * seq + ti) * seq..(h * seq + ti + 1) * seq];
                for tj in 0..seq {
                    let mut dot = 0.0;
                    for e in 0..dh {
                        dot += q[ti * d + off + e] * k[tj * d + off + e];
                    }
                    row[tj] = dot * scale;
                }
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for p in row.iter_mut() {
                    *p = (*p - max).exp();
                    sum += *p;
                }
                for p in row.iter_mut() {
                    *p /= sum;
                }
                let dst = &mut ctx[ti * d + off..ti * d + off + dh];
                for tj in 0..seq {
                    let w = row[tj];
                    for e in 0..dh {
                        dst[e] += w * v[tj * d + off + e];
                    }
                }
            }
        }
        let mut o = vec![0.0; seq * d];
        linear_fwd(&ctx, seq, params.layer(li, 8), params.layer(li, 9), d, d, &mut o);
        let mut x_mid = x_in.clone();
        for (xm, ov) in x_mid.iter_mut().zip(o.iter()) {
            *xm += ov;
        }

        let mut a2 = vec![0.0; seq * d];
        let mut ln2_stats = Vec::new();
        ln_forward(
            &x_mid,
            seq,
            d,
            params.layer(li, 10),
            params.layer(li, 11),
            &mut a2,
            &mut ln2_stats,
        );
        let mut h_pre = vec![0.0; seq * hdim];
        linear_fwd(&a2, seq, params.layer(li, 12), params.layer(li, 13), d, hdim, &mut h_pre);
        let h_act: Vec<f64> = h_pre.iter().map(|&u| gelu(u)).collect();
        let mut mlp_out = vec![0.0; seq * d];
        linear_fwd(&h_act, seq, params.layer(li, 14), params.layer(li, 15), hdim, d, &mut mlp_out);
        let mut x_out = x_mid.clone();
        for (xo, mv) in x_out.iter_mut().zip(mlp_out.iter()) {
            *xo += mv;
        }

        layers.push(LayerCache {
            x_in,
            a1,
            ln1_stats,
            q,
            k,
            v,
            probs,
            ctx,
            x_mid,
            a2,
            ln2_stats,
            h_pre,
            h_act,
        });
        x = x_out;
    }

    let tail = Params::tail(spec);
    let x_out_cls = x[cls_idx * d..(cls_idx + 1) * d].to_vec();
    let mut fin = vec![0.0; d];
    let mut fin_stats_v = Vec::new();
    ln_forward(
        &x_out_cls,
        1,
        d,
        &params.blocks[tail],
        &params.blocks[tail + 1],
        &mut fin,
        &mut fin_stats_v,
    );
    let k_cls = spec.n_classes;
    let mut logits = vec![0.0; k_cls];
    linear_fwd(&fin, 1, &params.blocks[tail + 2], &params.blocks[tail + 3], d, k_cls, &mut logits);

    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs_out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = probs_out.iter().sum();
    for p in probs_out.iter_mut() {
        *p /= z;
    }

    SampleCache {
        layers,
        x_out_cls,
        fin_stats: fin_stats_v[0],
        fin,
        logits,
        probs_out,
    }
}

/// Mean cross-entropy over a batch plus parameter gradients. When
/// `prompt_rows` is nonempty, those tokens are prepended to every sample
/// (training-time prompt-noise augmentation); they receive no gradient.
pub fn batch_loss_and_grads(
    params: &Params,
    inputs: &Tensor64,
    labels: &[usize],
    prompt_rows: &[f64],
) -> Result<(f64, Params)> {
    let spec = &params.spec;
    let (d, m, heads) = (spec.embed_dim, spec.n_patches, spec.n_heads);
    let n_prompts = prompt_rows.len() / d.max(1);
    let seq = n_prompts + m + 1;
    let cls_idx = n_prompts;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let hdim = spec.mlp_dim();
    let b_sz = inputs.shape()[0];
    let tail = Params::tail(spec);

    let mut grads = params.zeros_like();
    let mut loss = 0.0;

    for bi in 0..b_sz {
        let sample = inputs.plane(bi);
        let cache = forward_sample(params, sample, prompt_rows);
        let label = labels[bi];
        loss += -cache.probs_out[label].max(1e-300).ln() / b_sz as f64;

        // head backward
        let mut dlogits = cache.probs_out.clone();
        dlogits[label] -= 1.0;
        for g in dlogits.iter_mut() {
            *g /= b_sz as f64;
        }
        let k_cls = spec.n_classes;
        let mut dfin = vec![0.0; d];
        {
            let (head_w_grad, rest) = {
                // split borrows: head_w grad is block tail+2, head_b is tail+3
                let (a, b) = grads.blocks.split_at_mut(tail + 3);
                (&mut a[tail + 2], &mut b[0])
            };
            linear_bwd(
                &cache.fin,
                1,
                &params.blocks[tail + 2],
                d,
                k_cls,
                &dlogits,
                head_w_grad,
                rest,
                &mut dfin,
            );
        }

        // final layer norm backward
        let mut dx_cls = vec![0.0; d];
        {
            let (fg, fb) = {
                let (a, b) = grads.blocks.split_at_mut(tail + 1);
                (&mut a[tail], &mut b[0])
            };
            ln_backward_row(
                &dfin,
                &cache.x_out_cls,
                cache.fin_stats.0,
                cache.fin_stats.1,
                &params.blocks[tail],
                fg,
                fb,
                &mut dx_cls,
            );
        }

        // gradient w.r.t. the full token matrix at the output of the last layer
        let mut dx = vec![0.0; seq * d];
        dx[cls_idx * d..(cls_idx + 1) * d].copy_from_slice(&dx_cls);

        // layers in reverse
        for li in (0..spec.n_layers).rev() {
            let lc = &cache.layers[li];
            let base = LAYER0 + li * LAYER_BLOCKS;

            // MLP block backward: x_out = x_mid + W2 gelu(W1 a2 + b1) + b2
            let mut dh_act = vec![0.0; seq * hdim];
            {
                let (w2g, b2g) = {
                    let (a, b) = grads.blocks.split_at_mut(base + 15);
                    (&mut a[base + 14], &mut b[0])
                };
                linear_bwd(
                    &lc.h_act,
                    seq,
                    params.layer(li, 14),
                    hdim,
                    d,
                    &dx,
                    w2g,
                    b2g,
                    &mut dh_act,
                );
            }
            let mut dh_pre = vec![0.0; seq * hdim];
            for i in 0..seq * hdim {
                dh_pre[i] = dh_act[i] * gelu_grad(lc.h_pre[i]);
            }
            let mut da2 = vec![0.0; seq * d];
            {
                let (w1g, b1g) = {
                    let (a, b) = grads.blocks.split_at_mut(base + 13);
                    (&mut a[base + 12], &mut b[0])
                };
                linear_bwd(
                    &lc.a2,
                    seq,
                    params.layer(li, 12),
                    d,
                    hdim,
                    &dh_pre,
                    w1g,
                    b1g,
                    &mut da2,
                );
            }
            // LN2 backward; residual: dx flows through unchanged as well
            let mut dx_mid = dx.clone();
            {
                let (g2g, b2g) = {
                    let (a, b) = grads.blocks.split_at_mut(base + 11);
                    (&mut a[base + 10], &mut b[0])
                };
                let mut drow = vec![0.0; d];
                for r in 0..seq {
                    ln_backward_row(
                        &da2[r * d..(r + 1) * d],
                        &lc.x_mid[r * d..(r + 1) * d],
                        lc.ln2_stats[r].0,
                        lc.ln2_stats[r].1,
                        params.layer(li, 10),
                        g2g,
                        b2g,
                        &mut drow,
                    );
                    for j in 0..d {
                        dx_mid[r * d + j] += drow[j];
                    }
                }
            }

            // attention block backward: x_mid = x_in + Wo ctx + bo
            let mut dctx = vec![0.0; seq * d];
            {
                let (wog, bog) = {
                    let (a, b) = grads.blocks.split_at_mut(base + 9);
                    (&mut a[base + 8], &mut b[0])
                };
                linear_bwd(
                    &lc.ctx,
                    seq,
                    params.layer(li, 8),
                    d,
                    d,
                    &dx_mid,
                    wog,
                    bog,
                    &mut dctx,
                );
            }

            let mut dq = vec![0.0; seq * d];
            let mut dk = vec![0.0; seq * d];
            let mut dv = vec![0.0; seq * d];
            for h in 0..heads {
                let off = h * dh;
                for ti in 0..seq {
                    let probs = &lc.probs[(h * seq + ti) * seq..(h * seq + ti + 1) * seq];
                    // dS[tj] = <dctx[ti, head], v[tj, head]>
                    let mut ds = vec![0.0; seq];
                    for tj in 0..seq {
                        let mut acc = 0.0;
                        for e in 0..dh {
                            acc += dctx[ti * d + off + e] * lc.v[tj * d + off + e];
                        }
                        ds[tj] = acc;
                        // dV accumulation
                        for e in 0..dh {
                            dv[tj * d + off + e] += probs[tj] * dctx[ti * d + off + e];
                        }
                    }
                    // softmax backward
                    let dot: f64 = ds.iter().zip(probs.iter()).map(|(a, b)| a * b).sum();
                    for tj in 0..seq {
                        let dscore = probs[tj] * (ds[tj] - dot) * scale;
                        for e in 0..dh {
                            dq[ti * d + off + e] += dscore * lc.k[tj * d + off + e];
                            dk[tj * d + off + e] += dscore * lc.q[ti * d + off + e];
                        }
                    }
                }
            }

            let mut da1 = vec![0.0; seq * d];
            let mut tmp = vec![0.0; seq * d];
            {
                let (wqg, bqg) = {
                    let (a, b) = grads.blocks.split_at_mut(base + 3);
                    (&mut a[base + 2], &mut b[0])
                };
                linear_bwd(&lc.a1, seq, params.layer(li, 2), d, d, &dq, wqg, bqg, &mut tmp);
            }
            for (o, &t) in da1.iter_mut().zip(tmp.iter()) {
                *o += t;
            }
            {
                let (wkg, bkg) = {
                    let (a, b) = grads.blocks.split_at_mut(base + 5);
                    (&mut a[base + 4], &mut b[0])
                };
                linear_bwd(&lc.a1, seq, params.layer(li, 4), d, d, &dk, wkg, bkg, &mut tmp);
            }
            for (o, &t) in da1.iter_mut().zip(tmp.iter()) {
                *o += t;
            }
            {
                let (wvg, bvg) = {
                    let (a, b) = grads.blocks.split_at_mut(base + 7);
                    (&mut a[base + 6], &mut b[0])
                };
                linear_bwd(&lc.a1, seq, params.layer(li, 6), d, d, &dv, wvg, bvg, &mut tmp);
            }
            for (o, &t) in da1.iter_mut().zip(tmp.iter()) {
                *o += t;
            }

            // LN1 backward; residual path adds dx_mid directly
            let mut dx_in = dx_mid.clone();
            {
                let (g1g, b1g) = {
                    let (a, b) = grads.blocks.split_at_mut(base + 1);
                    (&mut a[base], &mut b[0])
                };
                let mut drow = vec![0.0; d];
                for r in 0..seq {
                    ln_backward_row(
                        &da1[r * d..(r + 1) * d],
                        &lc.x_in[r * d..(r + 1) * d],
                        lc.ln1_stats[r].0,
                        lc.ln1_stats[r].1,
                        params.layer(li, 0),
                        g1g,
                        b1g,
                        &mut drow,
                    );
                    for j in 0..d {
                        dx_in[r * d + j] += drow[j];
                    }
                }
            }
            dx = dx_in;
        }

        // embedding backward; prompt rows are inputs and receive nothing
        for j in 0..d {
            grads.blocks[CLS][j] += dx[cls_idx * d + j];
            grads.blocks[POS][j] += dx[cls_idx * d + j];
        }
        for t in 0..m {
            let drow = &dx[(cls_idx + 1 + t) * d..(cls_idx + 2 + t) * d];
            for j in 0..d {
                grads.blocks[POS][(t + 1) * d + j] += drow[j];
                grads.blocks[PATCH_B][j] += drow[j];
            }
            for i in 0..spec.input_dim {
                let xi = sample[t * spec.input_dim + i];
                let dwrow = &mut grads.blocks[PATCH_W][i * d..(i + 1) * d];
                for j in 0..d {
                    dwrow[j] += xi * drow[j];
                }
            }
        }
    }

    Ok((loss, grads))
}

/// Mean cross-entropy of the batch (no gradients). Used by the finite
/// difference check.
pub fn batch_loss(params: &Params, inputs: &Tensor64, labels: &[usize], prompt_rows: &[f64]) -> f64 {
    let b_sz = inputs.shape()[0];
    let mut loss = 0.0;
    for bi in 0..b_sz {
        let cache = forward_sample(params, inputs.plane(bi), prompt_rows);
        loss += -cache.probs_out[labels[bi]].max(1e-300).ln() / b_sz as f64;
    }
    loss
}

/// Batch argmax predictions with the trainer's own (unprompted) forward.
pub fn batch_predict(params: &Params, inputs: &Tensor64) -> Vec<usize> {
    let b_sz = inputs.shape()[0];
    (0..b_sz)
        .map(|bi| {
            let cache = forward_sample(params, inputs.plane(bi), &[]);
            let mut best = 0;
            for (j, &v) in cache.logits.iter().enumerate() {
                if v > cache.logits[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Plain Adam over the parameter blocks.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Params,
    v: Params,
}

impl Adam {
    pub fn new(lr: f64, template: &Params) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: template.zeros_like(),
            v: template.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (bi, block) in params.blocks.iter_mut().enumerate() {
            let g = &grads.blocks[bi];
            let m = &mut self.m.blocks[bi];
            let v = &mut self.v.blocks[bi];
            for i in 0..block.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                block[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Deterministic epoch shuffler for minibatch order.
pub fn minibatch_order(n: usize, epoch: u64, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    SeedStream::new(SeedStream::derive(seed, &[0xba7c4, epoch])).shuffle(&mut idx);
    idx
}
