//! Seeded randomness for every stochastic operation in the workspace.
//!
//! One generator everywhere: ChaCha8, a counter-based stream cipher RNG.
//! Identical seed gives an identical stream within this implementation;
//! bit-exact equality across languages or rand versions is not promised.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gumbel-noise uniforms are clamped away from {0, 1} before the double log.
const UNIFORM_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream, stable in (seed, tag).
    pub fn derive(&self, tag: &str) -> Rng {
        Rng::new(fnv1a(self.seed, tag.as_bytes()))
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.gen_range(0..n)
    }

    /// Standard Gumbel draw, -log(-log u) with u clamped to [1e-12, 1-1e-12].
    pub fn gumbel(&mut self) -> f64 {
        let u = self.uniform().clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
        -(-u.ln()).ln()
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        xs.shuffle(&mut self.inner);
    }

    /// Uniform random permutation of 0..n.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..100 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn different_seeds_diverge() {
        let mut a = Rng::new(1);
        let mut b = Rng::new(2);
        let xs: Vec<f64> = (0..8).map(|_| a.uniform()).collect();
        let ys: Vec<f64> = (0..8).map(|_| b.uniform()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn derive_is_stable_and_distinct() {
        let root = Rng::new(42);
        assert_eq!(root.derive("x").seed(), root.derive("x").seed());
        assert_ne!(root.derive("x").seed(), root.derive("y").seed());
    }

    #[test]
    fn gumbel_is_finite() {
        let mut rng = Rng::new(3);
        for _ in 0..10_000 {
            assert!(rng.gumbel().is_finite());
        }
    }

    #[test]
    fn permutation_is_bijective() {
        let mut rng = Rng::new(11);
        let mut p = rng.permutation(50);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }
}
