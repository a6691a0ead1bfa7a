//! Seeded, stream-addressable randomness.
//!
//! Every random draw in the crate comes from ChaCha20 (`rand_chacha`), keyed by
//! a 64-bit seed and positioned on a 64-bit stream. ChaCha is a counter-based
//! generator with a fixed, platform-independent output sequence, so a given
//! `(seed, stream)` pair reproduces the same draws on every machine. Work that
//! runs in parallel gets its own stream, derived with [`RngSpec::derive`], so
//! the number of worker threads never changes what is drawn.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

pub type IgrRng = ChaCha20Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngSpec {
    pub seed: u64,
    #[serde(default)]
    pub stream: u64,
}

impl RngSpec {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream: 0 }
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    pub fn rng(&self) -> IgrRng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }

    /// Child spec on a stream mixed from this stream and `tags`.
    pub fn derive(&self, tags: &[u64]) -> RngSpec {
        let mut h = splitmix64(self.stream ^ 0x5851_f42d_4c95_7f2d);
        for &t in tags {
            h = splitmix64(h ^ splitmix64(t.wrapping_add(0x9e37_79b9_7f4a_7c15)));
        }
        RngSpec {
            seed: self.seed,
            stream: h,
        }
    }
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_spec_same_sequence() {
        let a: Vec<u64> = RngSpec::with_stream(7, 3)
            .rng()
            .random_iter()
            .take(16)
            .collect();
        let b: Vec<u64> = RngSpec::with_stream(7, 3)
            .rng()
            .random_iter()
            .take(16)
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn streams_differ() {
        let a: u64 = RngSpec::with_stream(7, 0).rng().random();
        let b: u64 = RngSpec::with_stream(7, 1).rng().random();
        assert_ne!(a, b);
        let c = RngSpec::new(7).derive(&[1, 2]);
        let d = RngSpec::new(7).derive(&[2, 1]);
        assert_ne!(c, d);
    }

    const PINNED: u64 = 9482535800248027256;

    #[test]
    fn pinned_first_draw() {
        // Frozen so that a dependency bump that changes the stream is noticed.
        let first: u64 = RngSpec::new(42).rng().random();
        assert_eq!(first, PINNED);
    }
}
