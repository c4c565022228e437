//! Counter-based random number generation.
//!
//! Every draw is a pure function of `(seed, counter)`: the counter is advanced
//! by one per 64-bit output and the output is the SplitMix64 finalizer applied
//! to `seed + counter * GOLDEN`. Normal variates come from the Box–Muller
//! transform over pairs of uniforms, so a given seed and call sequence yields
//! the same bits on every platform.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Explicitly threaded generator state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub counter: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    /// Independent stream keyed by a label and an index, e.g. `("batch", step)`.
    pub fn derive(seed: u64, label: &str, index: u64) -> Self {
        let mut key = mix64(seed ^ GOLDEN);
        for b in label.bytes() {
            key = mix64(key ^ u64::from(b));
        }
        key = mix64(key ^ index.wrapping_mul(GOLDEN));
        Self::new(key)
    }

    pub fn next_u64(&mut self) -> u64 {
        let out = mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN)));
        self.counter = self.counter.wrapping_add(1);
        out
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`. Uses rejection to avoid modulo bias.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// A pair of independent standard normals.
    pub fn normal_pair(&mut self) -> (f64, f64) {
        // 1 - u lies in (0, 1], keeping ln finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let radius = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        (radius * theta.cos(), radius * theta.sin())
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let k = k.min(n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

/// Normal samples with standard deviation `scale`.
pub fn randn(shape: &[usize], scale: f64, rng: &mut RngState) -> Result<Tensor> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::invalid(format!("randn: zero-size shape {shape:?}")));
    }
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(Error::invalid(format!("randn: scale must be >= 0, got {scale}")));
    }
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len + 1);
    while data.len() < len {
        let (a, b) = rng.normal_pair();
        data.push(a * scale);
        data.push(b * scale);
    }
    data.truncate(len);
    Tensor::new(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_scale_gives_zeros() {
        let t = randn(&[2, 2], 0.0, &mut RngState::new(3)).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_same_bits() {
        let a = randn(&[5, 7], 0.3, &mut RngState::new(11)).unwrap();
        let b = randn(&[5, 7], 0.3, &mut RngState::new(11)).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn large_sample_moments() {
        let t = randn(&[10000], 1.0, &mut RngState::new(7)).unwrap();
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((0.95..1.05).contains(&var.sqrt()), "std {}", var.sqrt());
    }

    #[test]
    fn zero_size_shape_rejected() {
        let mut rng = RngState::new(0);
        assert!(matches!(randn(&[], 1.0, &mut rng), Err(Error::InvalidArgument(_))));
        assert!(matches!(randn(&[3, 0], 1.0, &mut rng), Err(Error::InvalidArgument(_))));
        assert!(randn(&[2], -1.0, &mut rng).is_err());
    }

    #[test]
    fn derived_streams_differ() {
        let a = RngState::derive(1, "batch", 0).next_u64();
        let b = RngState::derive(1, "batch", 1).next_u64();
        let c = RngState::derive(1, "init", 0).next_u64();
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn sample_indices_distinct() {
        let mut rng = RngState::new(5);
        let mut idx = rng.sample_indices(20, 20);
        idx.sort_unstable();
        assert_eq!(idx, (0..20).collect::<Vec<_>>());
    }
}
