//! INT8 forward path.
//!
//! Per-tensor symmetric affine quantization of the weight matrices; bias and
//! norm vectors stay in f64. The quantized matmul accumulates
//! `sum_i x[i] * q[i][j]` with the integer weights widened to f64 and applies
//! the tensor scale once at the output, so each layer boundary sees an f64
//! accumulation of integer-scaled products.

use crate::error::{FozoError, Result};
use crate::model::{
    forward_view, hash_tensor, Fnv, ForwardOutput, FrozenModel, LayerView, Mat, ModelSpec,
    ModelView, PromptModel, PromptSet,
};
use crate::Tensor64;

/// A weight matrix stored as INT8 codes with one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantMat {
    codes: Vec<i8>,
    scale: f64,
    in_dim: usize,
    out_dim: usize,
}

impl QuantMat {
    /// Symmetric per-tensor quantization: `scale = max|w| / 127`,
    /// `code = round(w / scale)` clamped to `[-127, 127]`.
    pub fn quantize(w: &Tensor64) -> Result<Self> {
        if w.rank() != 2 {
            return Err(FozoError::shape(format!(
                "quantize expects rank-2 weights, got {:?}",
                w.shape()
            )));
        }
        let max_abs = w.data().iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        // all-zero tensors quantize to zero codes and dequantize exactly
        let scale = if max_abs == 0.0 { 1.0 } else { max_abs / 127.0 };
        let codes = w
            .data()
            .iter()
            .map(|&v| (v / scale).round().clamp(-127.0, 127.0) as i8)
            .collect();
        Ok(Self {
            codes,
            scale,
            in_dim: w.shape()[0],
            out_dim: w.shape()[1],
        })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    /// Reconstruct the float tensor. Round-trip error is at most `scale / 2`
    /// per entry.
    pub fn dequantize(&self) -> Result<Tensor64> {
        Tensor64::new(
            vec![self.in_dim, self.out_dim],
            self.codes.iter().map(|&c| c as f64 * self.scale).collect(),
        )
    }
}

impl Mat for QuantMat {
    fn in_dim(&self) -> usize {
        self.in_dim
    }

    fn out_dim(&self) -> usize {
        self.out_dim
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let n = self.out_dim;
        out.fill(0.0);
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.codes[i * n..(i + 1) * n];
            for (o, &c) in out.iter_mut().zip(row.iter()) {
                *o += xi * c as f64;
            }
        }
        for o in out.iter_mut() {
            *o *= self.scale;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct QuantLayer {
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    pub wq: QuantMat,
    pub bq: Vec<f64>,
    pub wk: QuantMat,
    pub bk: Vec<f64>,
    pub wv: QuantMat,
    pub bv: Vec<f64>,
    pub wo: QuantMat,
    pub bo: Vec<f64>,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
    pub w1: QuantMat,
    pub b1: Vec<f64>,
    pub w2: QuantMat,
    pub b2: Vec<f64>,
}

/// INT8 variant of [`FrozenModel`]: same topology, quantized matrix weights.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    spec: ModelSpec,
    patch_w: QuantMat,
    patch_b: Vec<f64>,
    cls: Vec<f64>,
    pos: Tensor64,
    layers: Vec<QuantLayer>,
    final_gamma: Vec<f64>,
    final_beta: Vec<f64>,
    head_w: QuantMat,
    head_b: Vec<f64>,
}

/// Quantize a float model to INT8. Only 8-bit is supported.
pub fn quantize(model: &FrozenModel, bits: u8) -> Result<QuantizedModel> {
    if bits != 8 {
        return Err(FozoError::Unsupported(format!(
            "only 8-bit quantization is supported, got {bits}"
        )));
    }
    let w = model.weights();
    let layers = w
        .layers
        .iter()
        .map(|l| {
            Ok(QuantLayer {
                ln1_gamma: l.ln1_gamma.data().to_vec(),
                ln1_beta: l.ln1_beta.data().to_vec(),
                wq: QuantMat::quantize(&l.wq)?,
                bq: l.bq.data().to_vec(),
                wk: QuantMat::quantize(&l.wk)?,
                bk: l.bk.data().to_vec(),
                wv: QuantMat::quantize(&l.wv)?,
                bv: l.bv.data().to_vec(),
                wo: QuantMat::quantize(&l.wo)?,
                bo: l.bo.data().to_vec(),
                ln2_gamma: l.ln2_gamma.data().to_vec(),
                ln2_beta: l.ln2_beta.data().to_vec(),
                w1: QuantMat::quantize(&l.w1)?,
                b1: l.b1.data().to_vec(),
                w2: QuantMat::quantize(&l.w2)?,
                b2: l.b2.data().to_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantizedModel {
        spec: model.spec().clone(),
        patch_w: QuantMat::quantize(&w.patch_w)?,
        patch_b: w.patch_b.data().to_vec(),
        cls: w.cls.data().to_vec(),
        pos: w.pos.clone(),
        layers,
        final_gamma: w.final_gamma.data().to_vec(),
        final_beta: w.final_beta.data().to_vec(),
        head_w: QuantMat::quantize(&w.head_w)?,
        head_b: w.head_b.data().to_vec(),
    })
}

impl QuantizedModel {
    fn view(&self) -> ModelView<'_, QuantMat> {
        ModelView {
            spec: &self.spec,
            patch_w: &self.patch_w,
            patch_b: &self.patch_b,
            cls: &self.cls,
            pos: &self.pos,
            layers: self
                .layers
                .iter()
                .map(|l| LayerView {
                    ln1_gamma: &l.ln1_gamma,
                    ln1_beta: &l.ln1_beta,
                    wq: &l.wq,
                    bq: &l.bq,
                    wk: &l.wk,
                    bk: &l.bk,
                    wv: &l.wv,
                    bv: &l.bv,
                    wo: &l.wo,
                    bo: &l.bo,
                    ln2_gamma: &l.ln2_gamma,
                    ln2_beta: &l.ln2_beta,
                    w1: &l.w1,
                    b1: &l.b1,
                    w2: &l.w2,
                    b2: &l.b2,
                })
                .collect(),
            final_gamma: &self.final_gamma,
            final_beta: &self.final_beta,
            head_w: &self.head_w,
            head_b: &self.head_b,
        }
    }

    pub fn forward(&self, batch: &Tensor64) -> Result<ForwardOutput> {
        self.forward_with_prompts(&PromptSet::empty(self.spec.embed_dim), batch)
    }

    /// Largest per-tensor reconstruction error, for diagnostics.
    pub fn max_roundtrip_error(&self, model: &FrozenModel) -> Result<f64> {
        let w = model.weights();
        let mut worst = 0.0f64;
        let mut check = |qm: &QuantMat, orig: &Tensor64| -> Result<()> {
            let deq = qm.dequantize()?;
            for (a, b) in deq.data().iter().zip(orig.data().iter()) {
                worst = worst.max((a - b).abs() / qm.scale());
            }
            Ok(())
        };
        check(&self.patch_w, &w.patch_w)?;
        for (ql, fl) in self.layers.iter().zip(w.layers.iter()) {
            check(&ql.wq, &fl.wq)?;
            check(&ql.wk, &fl.wk)?;
            check(&ql.wv, &fl.wv)?;
            check(&ql.wo, &fl.wo)?;
            check(&ql.w1, &fl.w1)?;
            check(&ql.w2, &fl.w2)?;
        }
        check(&self.head_w, &w.head_w)?;
        Ok(worst)
    }
}

impl PromptModel for QuantizedModel {
    fn forward_with_prompts(&self, prompts: &PromptSet, batch: &Tensor64) -> Result<ForwardOutput> {
        forward_view(&self.view(), prompts, batch)
    }

    fn weight_hash(&self) -> u64 {
        let mut h = Fnv::new();
        let vecs = |v: &[f64], h: &mut Fnv| {
            h.write_u64(v.len() as u64);
            for &x in v {
                h.write_u64(x.to_bits());
            }
        };
        let mats = |m: &QuantMat, h: &mut Fnv| {
            h.write_u64(m.in_dim as u64);
            h.write_u64(m.out_dim as u64);
            h.write_u64(m.scale.to_bits());
            h.write(&m.codes.iter().map(|&c| c as u8).collect::<Vec<u8>>());
        };
        mats(&self.patch_w, &mut h);
        vecs(&self.patch_b, &mut h);
        vecs(&self.cls, &mut h);
        hash_tensor(&mut h, &self.pos);
        for l in &self.layers {
            vecs(&l.ln1_gamma, &mut h);
            vecs(&l.ln1_beta, &mut h);
            mats(&l.wq, &mut h);
            vecs(&l.bq, &mut h);
            mats(&l.wk, &mut h);
            vecs(&l.bk, &mut h);
            mats(&l.wv, &mut h);
            vecs(&l.bv, &mut h);
            mats(&l.wo, &mut h);
            vecs(&l.bo, &mut h);
            vecs(&l.ln2_gamma, &mut h);
            vecs(&l.ln2_beta, &mut h);
            mats(&l.w1, &mut h);
            vecs(&l.b1, &mut h);
            mats(&l.w2, &mut h);
            vecs(&l.b2, &mut h);
        }
        vecs(&self.final_gamma, &mut h);
        vecs(&self.final_beta, &mut h);
        mats(&self.head_w, &mut h);
        vecs(&self.head_b, &mut h);
        h.finish()
    }

    fn spec(&self) -> &ModelSpec {
        &self.spec
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::predict;
    use crate::rng::{gaussian, SeedStream};

    #[test]
    fn zero_tensor_quantizes_exactly() {
        let w = Tensor64::zeros(vec![4, 4]);
        let q = QuantMat::quantize(&w).unwrap();
        assert!(q.codes().iter().all(|&c| c == 0));
        assert_eq!(q.dequantize().unwrap().data(), w.data());
    }

    #[test]
    fn roundtrip_error_within_half_scale() {
        let w = gaussian::<f64>(&mut SeedStream::new(5), &[6, 9]).unwrap();
        let q = QuantMat::quantize(&w).unwrap();
        let deq = q.dequantize().unwrap();
        for (a, b) in deq.data().iter().zip(w.data().iter()) {
            assert!((a - b).abs() <= q.scale() / 2.0 + 1e-15);
        }
    }

    #[test]
    fn rejects_other_bit_widths() {
        let model = FrozenModel::random_init(ModelSpec::toy(), 1).unwrap();
        assert!(matches!(
            quantize(&model, 4),
            Err(FozoError::Unsupported(_))
        ));
    }

    #[test]
    fn quantized_forward_stays_close_on_random_model() {
        let spec = ModelSpec::toy();
        let model = FrozenModel::random_init(spec.clone(), 3).unwrap();
        let qmodel = quantize(&model, 8).unwrap();
        let batch = gaussian::<f64>(
            &mut SeedStream::new(4),
            &[8, spec.n_patches, spec.input_dim],
        )
        .unwrap();
        let fo = model.forward(&batch).unwrap();
        let qo = qmodel.forward(&batch).unwrap();
        // same topology, INT8 noise only: predictions mostly agree even on a
        // random (untrained) model
        let fp = predict(&fo.logits).unwrap();
        let qp = predict(&qo.logits).unwrap();
        let agree = fp.iter().zip(qp.iter()).filter(|(a, b)| a == b).count();
        assert!(agree >= 4, "agreement {agree}/8");
        assert_eq!(qo.cls_per_layer.len(), spec.n_layers);
    }

    #[test]
    fn quantized_hash_stable_across_forwards() {
        let spec = ModelSpec::toy();
        let model = FrozenModel::random_init(spec.clone(), 3).unwrap();
        let qmodel = quantize(&model, 8).unwrap();
        let h0 = qmodel.weight_hash();
        let batch = gaussian::<f64>(
            &mut SeedStream::new(4),
            &[2, spec.n_patches, spec.input_dim],
        )
        .unwrap();
        let _ = qmodel.forward(&batch).unwrap();
        assert_eq!(qmodel.weight_hash(), h0);
    }
}
