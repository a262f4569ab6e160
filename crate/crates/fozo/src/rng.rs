//! Deterministic, portable random sampling.
//!
//! The optimizer's seed-replay update regenerates perturbation tensors from
//! stored 64-bit seeds, so sample generation has to be bit-identical across
//! runs and platforms. To that end:
//!
//! * the generator is a counter-based SplitMix64: output `i` is a pure
//!   function of `(seed, i)`, with no hidden state beyond the counter;
//! * the Gaussian transform is Box-Muller evaluated with in-crate `ln`,
//!   `sin` and `cos` implementations that use only IEEE-754 arithmetic
//!   (`+ - * /` and `sqrt` are correctly rounded everywhere), never libm.
//!
//! The generator identity is `splitmix64-boxmuller-v1` and is recorded in
//! every file format that stores seeds.

use crate::error::{FozoError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Identity tag for the generator + transform pair. Part of the on-disk
/// format contract: a checkpoint or record stream produced with a different
/// generator must be rejected rather than silently replayed.
pub const GENERATOR_ID: &str = "splitmix64-boxmuller-v1";

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based random stream: identical `(seed, counter)` always yields the
/// identical output sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedStream {
    seed: u64,
    counter: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    /// Resume a stream at an explicit counter position.
    pub fn with_counter(seed: u64, counter: u64) -> Self {
        Self { seed, counter }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Derive a child seed from a base seed and a tag path. Used to split
    /// independent streams (per probe, per segment, per trial) without
    /// coordination.
    pub fn derive(base: u64, tags: &[u64]) -> u64 {
        let mut s = mix(base.wrapping_add(GOLDEN));
        for &t in tags {
            s = mix(s ^ mix(t.wrapping_add(GOLDEN)));
        }
        s
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.seed.wrapping_add(GOLDEN.wrapping_mul(self.counter)))
    }

    /// Uniform draw in the half-open interval `(0, 1]`.
    ///
    /// The lower bound is open so the Box-Muller logarithm never sees zero.
    #[inline]
    pub fn next_uniform(&mut self) -> f64 {
        let bits = self.next_u64() >> 11; // 53 bits
        (bits + 1) as f64 * (1.0 / 9_007_199_254_740_992.0) // 2^-53
    }

    /// Uniform draw in `[lo, hi)`.
    #[inline]
    pub fn next_uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        let bits = self.next_u64() >> 11;
        let u = bits as f64 * (1.0 / 9_007_199_254_740_992.0); // [0, 1)
        lo + (hi - lo) * u
    }

    /// One standard-normal pair via Box-Muller. Consumes exactly two `u64`
    /// draws.
    #[inline]
    pub fn next_gaussian_pair(&mut self) -> (f64, f64) {
        let u1 = self.next_uniform();
        let u2 = self.next_uniform();
        let radius = (-2.0 * portable_ln(u1)).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        let (sin_t, cos_t) = portable_sin_cos(theta);
        (radius * cos_t, radius * sin_t)
    }

    /// Fill a slice with standard normals. A slice of length `n` always
    /// consumes `2 * ceil(n / 2)` `u64` draws, so the counter advance is a
    /// pure function of `n`.
    pub fn fill_gaussian(&mut self, out: &mut [f64]) {
        let mut i = 0;
        while i + 1 < out.len() {
            let (a, b) = self.next_gaussian_pair();
            out[i] = a;
            out[i + 1] = b;
            i += 2;
        }
        if i < out.len() {
            let (a, _) = self.next_gaussian_pair();
            out[i] = a;
        }
    }

    /// Fisher-Yates shuffle, deterministic under the stream state.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        let n = items.len();
        for i in (1..n).rev() {
            let j = (self.next_u64() % (i as u64 + 1)) as usize;
            items.swap(i, j);
        }
    }
}

/// Sample an iid standard-normal tensor of the given shape.
///
/// Bit-identical across repeated calls with the same stream state; the stream
/// counter advances deterministically (see [`SeedStream::fill_gaussian`]).
pub fn gaussian<T: Scalar>(stream: &mut SeedStream, shape: &[usize]) -> Result<Tensor<T>> {
    if shape.is_empty() {
        return Err(FozoError::invalid("gaussian: shape must be nonempty"));
    }
    if shape.iter().any(|&e| e == 0) {
        return Err(FozoError::invalid(format!(
            "gaussian: zero-extent shape {shape:?}"
        )));
    }
    let len: usize = shape.iter().product();
    let mut buf = vec![0.0f64; len];
    stream.fill_gaussian(&mut buf);
    let data: Vec<T> = buf.into_iter().map(T::from_f64_lossy).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Sample a tensor with entries uniform in `[lo, hi)`.
pub fn uniform<T: Scalar>(
    stream: &mut SeedStream,
    shape: &[usize],
    lo: f64,
    hi: f64,
) -> Result<Tensor<T>> {
    if shape.is_empty() || shape.iter().any(|&e| e == 0) {
        return Err(FozoError::invalid(format!(
            "uniform: invalid shape {shape:?}"
        )));
    }
    let len: usize = shape.iter().product();
    let data: Vec<T> = (0..len)
        .map(|_| T::from_f64_lossy(stream.next_uniform_in(lo, hi)))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

// --- portable elementary functions -----------------------------------------
//
// libm implementations of ln/sin/cos are not bit-identical across platforms.
// These versions use only +,-,*,/ (correctly rounded by IEEE 754) plus
// integer bit manipulation, so their results are reproducible everywhere.
// They are accurate to a few ulps, which is far more than the sampling
// transform needs; they are NOT general replacements for libm.

/// Natural log of a positive, normal `f64`.
pub(crate) fn portable_ln(x: f64) -> f64 {
    debug_assert!(x.is_finite() && x > 0.0 && x >= f64::MIN_POSITIVE);
    const LN2: f64 = std::f64::consts::LN_2;
    const SQRT2: f64 = std::f64::consts::SQRT_2;

    let bits = x.to_bits();
    let mut exp = ((bits >> 52) & 0x7FF) as i64 - 1023;
    let mut m = f64::from_bits((bits & 0x000F_FFFF_FFFF_FFFF) | 0x3FF0_0000_0000_0000);
    // m in [1, 2); center on 1 so the atanh series converges fast
    if m > SQRT2 {
        m *= 0.5;
        exp += 1;
    }
    let s = (m - 1.0) / (m + 1.0);
    let s2 = s * s;
    // 2*atanh(s) = 2*(s + s^3/3 + s^5/5 + ...); |s| <= 0.1716 so terms decay
    // by ~3e-2 each and s^19 suffices for f64.
    let mut acc = 1.0 / 19.0;
    for k in (1..=8).rev() {
        acc = acc * s2 + 1.0 / (2 * k + 1) as f64;
    }
    let ln_m = 2.0 * s * (acc * s2 + 1.0);
    exp as f64 * LN2 + ln_m
}

/// Simultaneous sine and cosine for `theta` in `[0, 2π]` (a little slack is
/// tolerated for rounding at the boundary).
pub(crate) fn portable_sin_cos(theta: f64) -> (f64, f64) {
    debug_assert!((-0.1..=2.0 * std::f64::consts::PI + 0.1).contains(&theta));
    // Cody-Waite split of pi/2 for exact-enough range reduction at |q| <= 4.
    const PI2_HI: f64 = 1.570_796_326_794_896_558e0;
    const PI2_LO: f64 = 6.123_233_995_736_766_036e-17;

    let q = (theta / std::f64::consts::FRAC_PI_2).floor();
    let mut r = (theta - q * PI2_HI) - q * PI2_LO;
    let mut quad = q as i64;
    if r > std::f64::consts::FRAC_PI_4 {
        r = (r - PI2_HI) - PI2_LO;
        quad += 1;
    }
    let (s, c) = (sin_poly(r), cos_poly(r));
    match quad.rem_euclid(4) {
        0 => (s, c),
        1 => (c, -s),
        2 => (-s, -c),
        _ => (-c, s),
    }
}

/// Taylor sine on |r| <= π/4 + ε; max truncation error ≈ 5e-17.
fn sin_poly(r: f64) -> f64 {
    let r2 = r * r;
    let c = [
        -1.0 / 6.0,
        1.0 / 120.0,
        -1.0 / 5040.0,
        1.0 / 362_880.0,
        -1.0 / 39_916_800.0,
        1.0 / 6_227_020_800.0,
        -1.0 / 1_307_674_368_000.0,
    ];
    let mut acc = c[6];
    for k in (0..6).rev() {
        acc = acc * r2 + c[k];
    }
    r + r * r2 * acc
}

/// Taylor cosine on |r| <= π/4 + ε; max truncation error ≈ 2e-18.
fn cos_poly(r: f64) -> f64 {
    let r2 = r * r;
    let c = [
        -0.5,
        1.0 / 24.0,
        -1.0 / 720.0,
        1.0 / 40_320.0,
        -1.0 / 3_628_800.0,
        1.0 / 479_001_600.0,
        -1.0 / 87_178_291_200.0,
        1.0 / 20_922_789_888_000.0,
    ];
    let mut acc = c[7];
    for k in (0..7).rev() {
        acc = acc * r2 + c[k];
    }
    1.0 + r2 * acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn portable_ln_matches_std() {
        let mut s = SeedStream::new(11);
        for _ in 0..20_000 {
            let x = s.next_uniform();
            let got = portable_ln(x);
            let want = x.ln();
            assert!(
                (got - want).abs() <= 1e-13 * want.abs().max(1.0),
                "ln({x}) = {got}, std = {want}"
            );
        }
        // extremes of the uniform draw range
        for x in [1.0, 0.5, 2.0f64.powi(-53), 1.0 - 1e-16] {
            assert!((portable_ln(x) - x.ln()).abs() <= 1e-13 * x.ln().abs().max(1.0));
        }
    }

    #[test]
    fn portable_sin_cos_matches_std() {
        for i in 0..=40_000 {
            let theta = 2.0 * std::f64::consts::PI * (i as f64 / 40_000.0);
            let (s, c) = portable_sin_cos(theta);
            assert!((s - theta.sin()).abs() <= 3e-15, "sin({theta})");
            assert!((c - theta.cos()).abs() <= 3e-15, "cos({theta})");
        }
    }

    #[test]
    fn same_seed_same_sequence() {
        let a: Tensor<f64> = gaussian(&mut SeedStream::new(7), &[2, 3]).unwrap();
        let b: Tensor<f64> = gaussian(&mut SeedStream::new(7), &[2, 3]).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn different_seeds_differ() {
        let a: Tensor<f64> = gaussian(&mut SeedStream::new(7), &[2, 3]).unwrap();
        let b: Tensor<f64> = gaussian(&mut SeedStream::new(8), &[2, 3]).unwrap();
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn counter_advances_deterministically() {
        let mut s = SeedStream::new(42);
        let _ = gaussian::<f64>(&mut s, &[3]).unwrap(); // ceil(3/2)*2 = 4 draws
        assert_eq!(s.counter(), 4);
        let mut t = SeedStream::with_counter(42, 4);
        assert_eq!(s.next_u64(), t.next_u64());
    }

    #[test]
    fn gaussian_rejects_bad_shapes() {
        assert!(gaussian::<f64>(&mut SeedStream::new(1), &[]).is_err());
        assert!(gaussian::<f64>(&mut SeedStream::new(1), &[3, 0]).is_err());
    }

    #[test]
    fn gaussian_moments() {
        // Monte Carlo check against N(0,1): mean in [-0.01, 0.01], variance
        // in [0.99, 1.01] at 1e6 samples.
        let n = 1_000_000usize;
        let mut s = SeedStream::new(2024);
        let mut buf = vec![0.0; n];
        s.fill_gaussian(&mut buf);
        let mean = buf.iter().sum::<f64>() / n as f64;
        let var = buf.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() <= 0.01, "mean = {mean}");
        assert!((0.99..=1.01).contains(&var), "var = {var}");
    }

    #[test]
    fn derive_is_stable_and_tag_sensitive() {
        let a = SeedStream::derive(5, &[1, 2]);
        let b = SeedStream::derive(5, &[1, 2]);
        let c = SeedStream::derive(5, &[2, 1]);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn uniform_range() {
        let t: Tensor<f64> = uniform(&mut SeedStream::new(3), &[1000], -0.25, 0.25).unwrap();
        assert!(t.data().iter().all(|&x| (-0.25..0.25).contains(&x)));
    }
}
