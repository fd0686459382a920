//! Seedable, splittable randomness.
//!
//! Each consumer draws from its own ChaCha stream, and every optimization
//! step gets its own disjoint window of that stream, so a run resumed at step
//! `n` sees exactly the numbers an uninterrupted run would.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Camera = 1,
    Background = 2,
    MlpInit = 3,
    Jitter = 4,
    Diffusion = 5,
    Dataset = 6,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngStreams {
    seed: u64,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, stream: Stream) -> ChaCha8Rng {
        self.at_step(stream, 0)
    }

    /// Generator for `stream` positioned at the window reserved for `step`
    /// (2^32 words per step).
    pub fn at_step(&self, stream: Stream, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream as u64);
        rng.set_word_pos((step as u128) << 32);
        rng
    }
}
