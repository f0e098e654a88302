//! Splittable counter-based random streams.
//!
//! A stream is a ChaCha8 keystream. Child streams derive their key by hashing
//! the parent key with a label, so any named stage can be re-run in isolation
//! and still draw exactly the same numbers.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug)]
pub struct RngStream {
    key: [u8; 32],
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"un2clip-root");
        h.update(seed.to_le_bytes());
        Self::from_key(h.finalize().into())
    }

    fn from_key(key: [u8; 32]) -> Self {
        Self {
            key,
            rng: ChaCha8Rng::from_seed(key),
        }
    }

    /// Independent child stream named `label`. Does not advance `self`.
    pub fn split(&self, label: &str) -> Self {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update(b"/");
        h.update(label.as_bytes());
        Self::from_key(h.finalize().into())
    }

    /// Independent child stream for an integer index (scene id, step, ...).
    pub fn split_index(&self, index: u64) -> Self {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update(b"#");
        h.update(index.to_le_bytes());
        Self::from_key(h.finalize().into())
    }

    /// Key and keystream position; enough to reconstruct the stream exactly.
    pub fn state(&self) -> ([u8; 32], u128) {
        (self.key, self.rng.get_word_pos())
    }

    pub fn restore(key: [u8; 32], word_pos: u128) -> Self {
        let mut s = Self::from_key(key);
        s.rng.set_word_pos(word_pos);
        s
    }

    /// Fresh 64-bit seed for a downstream consumer.
    pub fn next_seed(&mut self) -> u64 {
        self.rng.next_u64()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(self)
    }

    pub fn uniform(&mut self) -> f64 {
        self.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.random_range(0..n)
    }

    /// Index drawn from unnormalized non-negative weights.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform() * total;
        for (i, &w) in weights.iter().enumerate() {
            if u < w {
                return i;
            }
            u -= w;
        }
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}
