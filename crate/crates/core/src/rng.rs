//! Seedable, splittable random streams.
//!
//! Every stochastic operation in the crate draws from a [`StreamRng`] owned by
//! the caller. Streams are derived from a root seed by splitting with string
//! labels (and optional indices), so any part of a run can be regenerated in
//! isolation: the stream for training step 7 is the same whether the run got
//! there directly or after a resume.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// A counter-based random stream (ChaCha8) with deterministic splitting.
#[derive(Clone, Debug)]
pub struct StreamRng {
    key: [u8; 32],
    inner: ChaCha8Rng,
}

impl StreamRng {
    /// Root stream for a run seed.
    pub fn from_seed(seed: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        Self {
            key,
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    /// Derive an independent child stream. Children depend only on the parent
    /// key and the label, never on how many values the parent has produced.
    pub fn split(&self, label: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(self.key);
        hasher.update([0x1f]);
        hasher.update(label.as_bytes());
        let key: [u8; 32] = hasher.finalize().into();
        Self {
            key,
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    /// Child stream for the `index`-th item of a labelled sequence
    /// (training steps, epochs, samples...).
    pub fn split_index(&self, label: &str, index: u64) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(self.key);
        hasher.update([0x2f]);
        hasher.update(label.as_bytes());
        hasher.update(index.to_le_bytes());
        let key: [u8; 32] = hasher.finalize().into();
        Self {
            key,
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    /// Uniform draw from an inclusive integer range.
    pub fn uniform_range(&mut self, lo: u64, hi: u64) -> u64 {
        assert!(lo <= hi, "empty range");
        let span = hi - lo + 1;
        // rejection sampling keeps the draw unbiased
        let zone = u64::MAX - (u64::MAX - span + 1) % span;
        loop {
            let v = self.next_u64();
            if v <= zone {
                return lo + v % span;
            }
        }
    }

    /// Uniform f64 in [0, 1).
    pub fn uniform_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller.
    pub fn normal_f64(&mut self) -> f64 {
        let u1 = loop {
            let u = self.uniform_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.uniform_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

impl RngCore for StreamRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}
