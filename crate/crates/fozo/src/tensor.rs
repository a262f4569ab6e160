//! Dense row-major tensors and the small linear-algebra suite the rest of the
//! crate is built on.
//!
//! Every public operation validates operand shapes and guarantees finite
//! output entries. All kernels are scalar loops in a fixed order, so results
//! are deterministic run to run.

use crate::error::{FozoError, Result};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

/// Dense row-major tensor. `shape.iter().product() == data.len()` always
/// holds, and entries are finite after every public operation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(FozoError::shape(format!(
                "shape {:?} implies {} entries, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        let t = Self { shape, data };
        t.check_finite("construction")?;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); len],
        }
    }

    pub fn scalar_filled(shape: Vec<usize>, value: T) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape, vec![value; len])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Number of rows / columns of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> T {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn at3(&self, i: usize, j: usize, k: usize) -> T {
        debug_assert_eq!(self.rank(), 3);
        self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }

    /// Row `r` of a rank-2 tensor as a slice.
    pub fn row(&self, r: usize) -> &[T] {
        debug_assert_eq!(self.rank(), 2);
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    /// Plane `i` of a rank-3 tensor as a slice of length `shape[1]*shape[2]`.
    pub fn plane(&self, i: usize) -> &[T] {
        debug_assert_eq!(self.rank(), 3);
        let sz = self.shape[1] * self.shape[2];
        &self.data[i * sz..(i + 1) * sz]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(FozoError::shape(format!(
                "reshape to {:?} incompatible with {} entries",
                shape,
                self.data.len()
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(FozoError::non_finite(context.to_string()));
        }
        Ok(())
    }

    /// Elementwise map. The caller's function must preserve finiteness; the
    /// result is validated.
    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Self::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(FozoError::shape(format!(
                "add: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a + b)
            .collect();
        Self::new(self.shape.clone(), data)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(FozoError::shape(format!(
                "sub: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a - b)
            .collect();
        Self::new(self.shape.clone(), data)
    }

    pub fn scale(&self, factor: T) -> Result<Self> {
        Self::new(
            self.shape.clone(),
            self.data.iter().map(|&v| v * factor).collect(),
        )
    }

    /// `self + factor * other`, shapes must match.
    pub fn add_scaled(&self, other: &Self, factor: T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(FozoError::shape(format!(
                "add_scaled: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a + factor * b)
            .collect();
        Self::new(self.shape.clone(), data)
    }

    /// Matrix product of two rank-2 tensors: `(m×k) · (k×n) -> (m×n)`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(FozoError::shape(format!(
                "matmul requires rank-2 operands, got {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(FozoError::shape(format!(
                "matmul: {:?} · {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                let row = &other.data[p * n..(p + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for (d, &b) in dst.iter_mut().zip(row.iter()) {
                    *d = *d + a * b;
                }
            }
        }
        Self::new(vec![m, n], out)
    }

    /// Row-wise softmax of a rank-2 tensor. Rows sum to 1 within 1e-9 and
    /// every entry lies in (0, 1].
    pub fn softmax_rows(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(FozoError::shape(format!(
                "softmax_rows requires rank-2, got {:?}",
                self.shape
            )));
        }
        self.check_finite("softmax_rows input")?;
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                out[i * n + j] = e;
                sum = sum + e;
            }
            for v in &mut out[i * n..(i + 1) * n] {
                *v = *v / sum;
            }
        }
        Self::new(vec![m, n], out)
    }

    /// Row-wise layer normalization with a learned affine applied after the
    /// normalization: `gamma * (x - mean) / sqrt(var + eps) + beta`.
    ///
    /// Uses the population variance; `eps` is kept tiny (1e-12) so normalized
    /// rows carry variance 1 within 1e-6 for non-degenerate inputs.
    pub fn layer_norm_rows(&self, gamma: &[T], beta: &[T]) -> Result<Self> {
        if self.rank() != 2 {
            return Err(FozoError::shape(format!(
                "layer_norm_rows requires rank-2, got {:?}",
                self.shape
            )));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        if gamma.len() != n || beta.len() != n {
            return Err(FozoError::shape(format!(
                "layer_norm_rows: affine length {} / {} vs width {}",
                gamma.len(),
                beta.len(),
                n
            )));
        }
        let eps = T::from_f64_lossy(1e-12);
        let inv_n = T::one() / T::from_f64_lossy(n as f64);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            let mut mean = T::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean * inv_n;
            let mut var = T::zero();
            for &v in row {
                let d = v - mean;
                var = var + d * d;
            }
            var = var * inv_n;
            let inv_std = T::one() / (var + eps).sqrt();
            for (j, &v) in row.iter().enumerate() {
                out[i * n + j] = gamma[j] * ((v - mean) * inv_std) + beta[j];
            }
        }
        Self::new(vec![m, n], out)
    }

    /// Per-column mean over axis 0 of a rank-2 tensor.
    pub fn mean_axis0(&self) -> Result<Tensor<T>> {
        if self.rank() != 2 {
            return Err(FozoError::shape(format!(
                "mean_axis0 requires rank-2, got {:?}",
                self.shape
            )));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        if m == 0 {
            return Err(FozoError::invalid("mean_axis0: zero rows"));
        }
        let inv_m = T::one() / T::from_f64_lossy(m as f64);
        let mut out = vec![T::zero(); n];
        for i in 0..m {
            for j in 0..n {
                out[j] = out[j] + self.data[i * n + j];
            }
        }
        for v in &mut out {
            *v = *v * inv_m;
        }
        Tensor::new(vec![n], out)
    }

    /// Per-column population standard deviation (divide by n) over axis 0.
    ///
    /// The population convention is used consistently for source statistics
    /// and the alignment loss.
    pub fn std_axis0(&self) -> Result<Tensor<T>> {
        let mean = self.mean_axis0()?;
        let (m, n) = (self.shape[0], self.shape[1]);
        let inv_m = T::one() / T::from_f64_lossy(m as f64);
        let mut out = vec![T::zero(); n];
        for i in 0..m {
            for j in 0..n {
                let d = self.data[i * n + j] - mean.data()[j];
                out[j] = out[j] + d * d;
            }
        }
        for v in &mut out {
            *v = (*v * inv_m).sqrt();
        }
        Tensor::new(vec![n], out)
    }

    /// Euclidean norm of all entries.
    pub fn norm_l2(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc = acc + v * v;
        }
        acc.sqrt()
    }

    /// Sum of elementwise products; shapes must match.
    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(FozoError::shape(format!(
                "dot: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let mut acc = T::zero();
        for (&a, &b) in self.data.iter().zip(other.data.iter()) {
            acc = acc + a * b;
        }
        Ok(acc)
    }

    /// Identity matrix of size `n`.
    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian, SeedStream};
    use proptest::prelude::*;

    type T64 = Tensor<f64>;

    #[test]
    fn shape_data_mismatch_rejected() {
        assert!(T64::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        assert!(T64::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(T64::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let a: T64 = gaussian(&mut SeedStream::new(3), &[3, 3]).unwrap();
        let i = T64::identity(3);
        let prod = i.matmul(&a).unwrap();
        assert_eq!(prod.data(), a.data());
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = T64::zeros(vec![2, 3]);
        let b = T64::zeros(vec![2, 3]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn softmax_uniform_rows() {
        let t = T64::new(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap();
        let s = t.softmax_rows().unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn mean_std_hand_computed() {
        // population convention: std([1,2,3]) = sqrt(2/3)
        let t = T64::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        assert!((t.mean_axis0().unwrap().data()[0] - 2.0).abs() < 1e-15);
        let expected = (2.0f64 / 3.0).sqrt();
        assert!((t.std_axis0().unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_normalizes() {
        let t: T64 = gaussian(&mut SeedStream::new(9), &[4, 16]).unwrap();
        let gamma = vec![1.0; 16];
        let beta = vec![0.0; 16];
        let n = t.layer_norm_rows(&gamma, &beta).unwrap();
        for i in 0..4 {
            let row = n.row(i);
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-9, "row mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "row var {var}");
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 2usize..9, seed in 0u64..1000) {
            let t: T64 = gaussian(&mut SeedStream::new(seed), &[rows, cols]).unwrap();
            let scaled = t.scale(5.0).unwrap();
            let s = scaled.softmax_rows().unwrap();
            for i in 0..rows {
                let sum: f64 = s.row(i).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
                prop_assert!(s.row(i).iter().all(|&v| v > 0.0 && v <= 1.0));
            }
        }

        #[test]
        fn add_scaled_matches_manual(seed in 0u64..500) {
            let a: T64 = gaussian(&mut SeedStream::new(seed), &[3, 4]).unwrap();
            let b: T64 = gaussian(&mut SeedStream::new(seed + 1), &[3, 4]).unwrap();
            let got = a.add_scaled(&b, -0.5).unwrap();
            let want = a.add(&b.scale(-0.5).unwrap()).unwrap();
            prop_assert_eq!(got.data(), want.data());
        }
    }
}
