//! Seed derivation for reproducible parallel Monte Carlo.
//!
//! Every independent stream of randomness (a trial, a chunk of moment
//! draws, a synthetic frame) gets its own generator seeded from
//! `base ^ mix(stream, index)`. Work is partitioned by index only, never by
//! thread, so results do not depend on the degree of parallelism.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used everywhere in the crate.
pub type SimRng = ChaCha8Rng;

/// SplitMix64 finaliser.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// `base ^ hash(stream, index)`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    base ^ splitmix64(splitmix64(stream) ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn rng_for(base: u64, stream: u64, index: u64) -> SimRng {
    SimRng::seed_from_u64(derive_seed(base, stream, index))
}

/// Compensated summation so aggregates are insensitive to magnitude ordering.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    pub fn add(&mut self, x: f64) {
        let y = x - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

impl std::iter::FromIterator<f64> for KahanSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = KahanSum::default();
        for x in iter {
            s.add(x);
        }
        s
    }
}
