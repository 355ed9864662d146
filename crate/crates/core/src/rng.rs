//! Deterministic, stream-splittable random numbers.
//!
//! Every consumer draws from its own ChaCha8 stream, keyed by the run seed
//! and a stream id. Reordering layers or adding a consumer therefore never
//! shifts another consumer's draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream ids. The high 32 bits name the purpose, the low 32 bits an index.
pub mod stream {
    pub const SAMPLING: u64 = 0;
    pub const INIT: u64 = 1 << 32;
    pub const SHUFFLE: u64 = 2 << 32;
    pub const EVAL: u64 = 3 << 32;
    pub const TEST: u64 = 4 << 32;
}

#[derive(Debug, Clone)]
pub struct Prng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    /// Stream used to sample the weights of layer `index`.
    pub fn for_layer(seed: u64, index: usize) -> Self {
        Self::with_stream(seed, stream::SAMPLING | index as u64)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Position inside the stream, in 32-bit words.
    pub fn word_pos(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn set_word_pos(&mut self, pos: u128) {
        self.inner.set_word_pos(pos);
    }

    /// Uniform draw in `[0, 1)` with 53 bits of resolution.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}
