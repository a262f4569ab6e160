//! Finite-difference gradient oracle over prompts.
//!
//! Central differences per prompt coordinate, used only by tests and
//! diagnostics to validate the zeroth-order estimator and to read gradient
//! norms at stream end. Never used by the adaptation loop.

use crate::{HarnessError, Result};
use fozo::{PromptSet, Tensor64};

/// Black-box prompt loss for the oracle.
pub type PromptLoss<'a> = dyn FnMut(&PromptSet) -> fozo::Result<f64> + 'a;

/// Central finite differences: `(L(P + h e_k) - L(P - h e_k)) / (2h)` per
/// coordinate of the prompt tensor.
pub fn gradient_oracle(
    loss_eval: &mut PromptLoss<'_>,
    prompts: &PromptSet,
    h: f64,
) -> Result<Tensor64> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(HarnessError::InvalidConfig(format!(
            "oracle step h must be > 0, got {h}"
        )));
    }
    let (p, d) = (prompts.count(), prompts.dim());
    let base = prompts.values().clone();
    let mut grad = vec![0.0; p * d];
    for row in 0..p {
        for col in 0..d {
            let idx = row * d + col;
            let mut bump = |delta: f64| -> Result<f64> {
                let mut data = base.data().to_vec();
                data[idx] += delta;
                let moved = PromptSet::from_values(Tensor64::new(vec![p, d], data)?)?;
                Ok(loss_eval(&moved)?)
            };
            let lp = bump(h)?;
            let lm = bump(-h)?;
            if !lp.is_finite() || !lm.is_finite() {
                return Err(HarnessError::OracleNonFinite { row, col });
            }
            grad[idx] = (lp - lm) / (2.0 * h);
        }
    }
    Ok(Tensor64::new(vec![p, d], grad)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use fozo::{gaussian, SeedStream};

    #[test]
    fn quadratic_oracle_matches_analytic() {
        let p = PromptSet::init_uniform(3, 2, 5).unwrap();
        let mut eval = |q: &PromptSet| -> fozo::Result<f64> {
            let n = q.values().norm_l2();
            Ok(0.5 * n * n)
        };
        let g = gradient_oracle(&mut eval, &p, 1e-5).unwrap();
        for (gi, pi) in g.data().iter().zip(p.values().data()) {
            assert!((gi - pi).abs() < 1e-8, "{gi} vs {pi}");
        }
    }

    #[test]
    fn linear_oracle_exact() {
        let p = PromptSet::init_uniform(4, 2, 3).unwrap();
        let c: Tensor64 = gaussian(&mut SeedStream::new(8), &[2, 3]).unwrap();
        let mut eval = |q: &PromptSet| -> fozo::Result<f64> { q.values().dot(&c) };
        for h in [1e-3, 1e-5] {
            let g = gradient_oracle(&mut eval, &p, h).unwrap();
            for (gi, ci) in g.data().iter().zip(c.data()) {
                assert!((gi - ci).abs() < 1e-9, "h={h}: {gi} vs {ci}");
            }
        }
    }

    #[test]
    fn non_finite_loss_reports_coordinate() {
        let p = PromptSet::init_uniform(5, 1, 2).unwrap();
        let mut calls = 0usize;
        let mut eval = |_: &PromptSet| -> fozo::Result<f64> {
            calls += 1;
            Ok(if calls >= 3 { f64::NAN } else { 0.0 })
        };
        match gradient_oracle(&mut eval, &p, 1e-4) {
            Err(HarnessError::OracleNonFinite { row: 0, col: 1 }) => {}
            other => panic!("expected coordinate (0,1) failure, got {other:?}"),
        }
    }
}
