//! Seeded random streams.
//!
//! A stream is a ChaCha20 generator keyed by `SHA-256(seed_le || tag)`. ChaCha
//! is counter based, so the sequence for a given `(seed, tag)` is identical on
//! every platform and independent of which thread consumes it. Experiments
//! derive one stream per logical purpose (`"init/member-3"`, `"split"`, ...)
//! instead of threading a single generator through the code.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    tag: String,
    rng: ChaCha20Rng,
}

pub fn derive_stream(master_seed: u64, tag: &str) -> RngStream {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    RngStream {
        seed: master_seed,
        tag: tag.to_owned(),
        rng: ChaCha20Rng::from_seed(key),
    }
}

impl RngStream {
    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A new stream keyed by `"{tag}/{sub}"` under the same master seed.
    /// Does not consume draws from `self`.
    pub fn child(&self, sub: &str) -> RngStream {
        derive_stream(self.seed, &format!("{}/{}", self.tag, sub))
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.normal();
        }
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }

    /// `amount` distinct indices drawn uniformly from `0..length`, in draw order.
    pub fn sample_indices(&mut self, length: usize, amount: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.rng, length, amount).into_vec()
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
