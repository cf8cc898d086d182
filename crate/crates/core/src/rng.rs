//! Seeded randomness.
//!
//! Every random draw in the crate goes through [`SeededRng`], a ChaCha8 stream
//! keyed by a 64-bit seed. Child streams are never split off a running
//! generator; they are keyed by [`derive_seed`] from the parent seed and a
//! path of indices, so parallel work produces the same draws regardless of
//! scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for `path` under `parent`.
///
/// Folds each index into the state with a golden-ratio increment followed by
/// the SplitMix64 finalizer: `s₀ = mix(parent)`, `sₖ₊₁ = mix(sₖ ⊕ (idxₖ + φ·(k+1)))`.
pub fn derive_seed(parent: u64, path: &[u64]) -> u64 {
    const PHI: u64 = 0x9e37_79b9_7f4a_7c15;
    let mut state = mix64(parent);
    for (k, &idx) in path.iter().enumerate() {
        let salt = PHI.wrapping_mul(k as u64 + 1);
        state = mix64(state ^ idx.wrapping_add(salt));
    }
    state
}

#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A fresh stream keyed by `derive_seed(self.seed, path)`. Does not
    /// advance `self`.
    pub fn fork(&self, path: &[u64]) -> SeededRng {
        SeededRng::new(derive_seed(self.seed, path))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform in `[lo, hi]`; returns `lo` without drawing when the range is empty.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        let u = self.uniform();
        if hi > lo {
            lo + (hi - lo) * u
        } else {
            lo
        }
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates shuffle driven by this stream.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        for _ in 0..100 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }

    #[test]
    fn frozen_first_draws() {
        // Pinned so an upstream change in the stream or the distributions shows up here.
        let mut r = SeededRng::new(7);
        let u = r.uniform();
        let n = r.normal();
        assert_eq!(u.to_bits(), 4594853223840476064);
        assert_eq!(n.to_bits(), 13832281233570148842);
        assert_eq!(derive_seed(7, &[1, 2]), 3734312187675024428);
    }

    #[test]
    fn derived_seeds_differ_by_path() {
        let a = derive_seed(1, &[0]);
        let b = derive_seed(1, &[1]);
        let c = derive_seed(1, &[0, 0]);
        let d = derive_seed(2, &[0]);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        assert_eq!(a, derive_seed(1, &[0]));
    }

    #[test]
    fn fork_does_not_advance_parent() {
        let mut p = SeededRng::new(3);
        let _child = p.fork(&[5]);
        let mut q = SeededRng::new(3);
        assert_eq!(p.uniform(), q.uniform());
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut r = SeededRng::new(11);
        let mut v: Vec<usize> = (0..50).collect();
        r.shuffle(&mut v);
        let mut s = v.clone();
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
        assert_ne!(v, s);
    }
}
