//! Counter-based random streams.
//!
//! Every stream is ChaCha8 keyed by the run seed. A stream id selects an
//! independent sequence and the word position is the counter, so a draw is a
//! pure function of `(seed, stream, position)`. Consumers derive a fresh
//! stream per purpose and per index (training step, sample number, ...) which
//! makes results independent of the order in which work is visited.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::numerics::real::Real;
use crate::numerics::tensor::Tensor;

/// Serializable snapshot of a stream position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut key = [0u8; 32];
        for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
            chunk.copy_from_slice(&splitmix64(seed ^ (i as u64).wrapping_mul(0xA24B_AED4_963E_E407)).to_le_bytes());
        }
        let mut inner = ChaCha8Rng::from_seed(key);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    /// Independent child stream for `(tag, index)`, a function of this
    /// stream's id (not its position); does not advance `self`.
    pub fn derive(&self, tag: u64, index: u64) -> Self {
        let parent = splitmix64(self.inner.get_stream() ^ 0x6A09_E667_F3BC_C908);
        let stream = splitmix64(parent ^ splitmix64(tag) ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        Self::with_stream(self.seed, stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn snapshot(&self) -> RngSnapshot {
        RngSnapshot {
            seed: self.seed,
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn restore(s: RngSnapshot) -> Self {
        let mut r = Self::with_stream(s.seed, s.stream);
        r.inner.set_word_pos(s.word_pos);
        r
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normal_tensor<R: Real>(&mut self, shape: impl Into<Vec<usize>>) -> Tensor<R> {
        Tensor::from_fn(shape, |_| R::of(self.normal()))
    }

    pub fn uniform_tensor<R: Real>(&mut self, shape: impl Into<Vec<usize>>, lo: f64, hi: f64) -> Tensor<R> {
        Tensor::from_fn(shape, |_| R::of(self.uniform_range(lo, hi)))
    }
}
