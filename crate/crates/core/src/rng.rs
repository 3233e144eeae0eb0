//! Seeded randomness.
//!
//! Every stochastic draw in the crate goes through [`Rng`], a thin wrapper
//! over ChaCha8 (`rand_chacha`) seeded with `seed_from_u64`. Gaussian
//! variates use the ziggurat sampler of `rand_distr::StandardNormal`. Both
//! algorithms are fixed and platform independent, so a seed fully determines
//! the stream.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

/// SplitMix64 finalizer, used to derive independent child seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child generator for a named sub-stream. The parent is not advanced,
    /// so adding a stream never perturbs the others.
    pub fn derive(&self, stream: &str) -> Rng {
        let mut h = mix(self.seed);
        for b in stream.bytes() {
            h = mix(h ^ u64::from(b));
        }
        Rng::new(h)
    }

    /// Child generator for an indexed sub-stream.
    pub fn derive_index(&self, stream: &str, index: u64) -> Rng {
        let base = self.derive(stream);
        Rng::new(mix(base.seed ^ mix(index)))
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}
