use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, StandardNormal};

use crate::error::{Error, Result};

/// Seeded, portable random source with a draw counter.
///
/// The counter increments once per public sampling call, which lets callers
/// assert that a code path consumed no randomness.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
    draws: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            draws: 0,
        }
    }

    /// Independent stream for item `index` of a run seeded with `base`.
    pub fn stream(base: u64, index: u64) -> Self {
        Self::new(stream_seed(base, index))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn draws(&self) -> u64 {
        self.draws
    }

    pub fn next_u64(&mut self) -> u64 {
        self.draws += 1;
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.draws += 1;
        self.inner.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.draws += 1;
        self.inner.gen_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.draws += 1;
        self.inner.sample(StandardNormal)
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Beta(gamma, gamma) draw.
    pub fn beta(&mut self, gamma: f64) -> Result<f64> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Config(format!("beta parameter must be finite and > 0, got {gamma}")));
        }
        let dist = Beta::new(gamma, gamma).map_err(|e| Error::Config(format!("beta({gamma}): {e}")))?;
        self.draws += 1;
        Ok(self.inner.sample(dist))
    }
}

/// Seed of ChaCha stream `index` under key `base`.
pub fn stream_seed(base: u64, index: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(base);
    r.set_stream(index);
    r.next_u64()
}
