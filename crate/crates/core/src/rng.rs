//! Deterministic counter-based random streams.
//!
//! Every consumer of randomness gets its own ChaCha8 stream derived from the
//! experiment seed, a [`Purpose`] tag and an index (epoch, step, ...). Draws
//! depend only on `(seed, purpose, index)`, so a resumed run reproduces the
//! exact noise of an uninterrupted one.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Substream tags. The discriminant is folded into the ChaCha stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    NoiseZ = 3,
    NoiseBeta = 4,
    Data = 5,
    Batches = 6,
    Sampling = 7,
    General = 8,
}

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::substream(seed, Purpose::General, 0)
    }

    pub fn substream(seed: u64, purpose: Purpose, index: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        // 8 bits of purpose, 56 bits of index.
        inner.set_stream(((purpose as u64) << 56) | (index & ((1 << 56) - 1)));
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform draw in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }

    /// `count` distinct indices from `0..n`, in draw order.
    pub fn choose_distinct(&mut self, n: usize, count: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, n, count).into_vec()
    }
}
