//! Counter-based random streams.
//!
//! A [`Stream`] is a 64-bit key. Child streams are derived by mixing the key
//! with an index, so the draws attached to `(iteration, observation)` or
//! `(iteration, draw, inner draw)` never depend on the order in which work is
//! scheduled. Actual variates come from a ChaCha8 generator keyed by the
//! stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Stream {
    key: u64,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream { key: splitmix64(seed) }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// Child stream for `index`. Distinct indices give statistically
    /// independent streams; the parent is not consumed.
    #[inline]
    pub fn split(&self, index: u64) -> Stream {
        Stream { key: splitmix64(self.key ^ splitmix64(index.wrapping_add(0x632B_E59B_D9B4_E019))) }
    }

    /// Child stream for a named purpose (estimator tags and the like).
    pub fn split_named(&self, name: &str) -> Stream {
        // FNV-1a; only needs to be stable, not strong.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in name.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        self.split(h)
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.key)
    }
}

/// Fill `out` with independent standard normal variates.
pub fn fill_standard_normal<R: rand::Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
}
