//! Seeded, stream-addressable randomness.
//!
//! Every randomized computation in this crate owns a [`RandomSource`] and
//! derives one child stream per logical unit of work (permutation j, trial
//! t, example i). Child streams are independent ChaCha streams, so work
//! units can run on any thread in any order and still draw exactly the same
//! values. No global state, no wall clock.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A (seed, stream) address into a deterministic random sequence.
///
/// Two sources with equal seed and stream produce identical draws. Child
/// streams derived with [`RandomSource::stream`] are distinct for distinct
/// ids and stable across releases of this crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomSource {
    seed: u64,
    stream: u64,
}

impl RandomSource {
    /// Root source for a run. All derived streams are a pure function of
    /// this seed.
    pub fn new(seed: u64) -> Self {
        Self { seed, stream: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives the child source with the given id. Distinct ids give
    /// distinct streams under one parent; nesting mixes, so
    /// `s.stream(1).stream(2)` and `s.stream(2).stream(1)` differ.
    pub fn stream(&self, id: u64) -> Self {
        Self {
            seed: self.seed,
            stream: mix(self.stream, id),
        }
    }

    /// Instantiates the generator at this address.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

/// SplitMix64 finalizer over a Weyl-shifted id; bijective in `id` for a
/// fixed parent, which is what guarantees sibling streams never collide.
fn mix(parent: u64, id: u64) -> u64 {
    let mut z = parent ^ id.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x1);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_address_same_draws() {
        let a = RandomSource::new(7).stream(3);
        let b = RandomSource::new(7).stream(3);
        let xs: Vec<u64> = a.rng().random_iter().take(16).collect();
        let ys: Vec<u64> = b.rng().random_iter().take(16).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn sibling_streams_differ() {
        let root = RandomSource::new(42);
        let mut seen = std::collections::HashSet::new();
        for id in 0..1000 {
            let first: u64 = root.stream(id).rng().random();
            assert!(seen.insert(first), "stream {id} repeated a sibling's draw");
        }
    }

    #[test]
    fn nesting_order_matters() {
        let root = RandomSource::new(1);
        assert_ne!(root.stream(1).stream(2), root.stream(2).stream(1));
        assert_ne!(root.stream(1).stream(2), root.stream(12));
    }

    #[test]
    fn different_seeds_diverge() {
        let a: u64 = RandomSource::new(1).stream(5).rng().random();
        let b: u64 = RandomSource::new(2).stream(5).rng().random();
        assert_ne!(a, b);
    }

    // Frozen so a refactor cannot silently re-map every derived stream and
    // invalidate recorded seeds in shipped reports.
    #[test]
    fn stream_derivation_is_stable() {
        let r = RandomSource::new(0xDEAD_BEEF);
        let mut rng = r.stream(17).rng();
        let draw: u64 = rng.random();
        assert_eq!(draw, 11_560_537_164_177_787_083);
    }
}
