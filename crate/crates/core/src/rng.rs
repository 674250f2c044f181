//! Explicit, splittable noise streams.
//!
//! Every stochastic oracle call draws from a [`NoiseStream`] passed in by the
//! caller. There is no global generator: two calls handed streams in the same
//! state return the same sample.

use nalgebra::DVector;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Stream ids at or above this bit are reserved for deriving child keys, so
/// a fork never replays the parent's own output.
const FORK_STREAM_BIT: u64 = 1 << 63;

#[derive(Clone, Debug)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Derives an independent child stream keyed by `id`.
    ///
    /// The child depends only on this stream's key and `id`, not on how many
    /// values have been drawn from `self`.
    pub fn fork(&self, id: u64) -> Self {
        let mut keyed = ChaCha8Rng::from_seed(self.rng.get_seed());
        keyed.set_stream(FORK_STREAM_BIT | id);
        keyed.set_word_pos(0);
        let mut key = [0u8; 32];
        keyed.fill_bytes(&mut key);
        Self {
            rng: ChaCha8Rng::from_seed(key),
        }
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn normal_vector(&mut self, len: usize) -> DVector<f64> {
        DVector::from_fn(len, |_, _| self.normal())
    }

    /// Uniform draw from `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }
}
