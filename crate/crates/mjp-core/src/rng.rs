//! Seeded, counter-based random streams.
//!
//! Every stochastic component (mask sampling, jigsaw permutations, parameter
//! init, dataset generation) pulls from a [`SeededRng`], a thin wrapper over
//! ChaCha8. ChaCha is a counter-based stream cipher, so a (seed, stream)
//! pair fully determines the sequence: the mask stream and the permutation
//! stream of one training iteration can be re-derived independently.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; folds a child id into a parent stream id.
fn mix(parent: u64, child: u64) -> u64 {
    let mut z = parent ^ child.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            stream: 0,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Root seed this stream was derived from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent substream addressed by `stream` relative to this one.
    /// Fully determined by (seed, derivation path), independent of how much
    /// the parent has been consumed; nesting derives fresh streams.
    pub fn derive(&self, stream: u64) -> Self {
        let child = mix(self.stream, stream);
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(child);
        SeededRng {
            seed: self.seed,
            stream: child,
            inner,
        }
    }

    /// Substream addressed by a (purpose, index) pair, e.g. one stream per
    /// training iteration per concern.
    pub fn derive2(&self, purpose: u64, index: u64) -> Self {
        self.derive(purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). Panics if n == 0.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Uniform integer in [lo, hi] inclusive.
    pub fn int_in(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..=hi)
    }

    /// Standard normal via rand_distr.
    pub fn normal(&mut self) -> f64 {
        self.inner.sample(rand_distr::StandardNormal)
    }

    /// Normal(0, sigma) truncated to [-2 sigma, 2 sigma] by resampling,
    /// the usual init for embedding tables.
    pub fn trunc_normal(&mut self, sigma: f64) -> f64 {
        loop {
            let x: f64 = self.normal();
            if x.abs() <= 2.0 {
                return x * sigma;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}
