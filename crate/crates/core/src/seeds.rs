//! Deterministic seed derivation.
//!
//! Every random decision in the toolkit draws from a ChaCha stream whose seed
//! is derived from the run seed plus a purpose label. Per-item substreams are
//! counter-based, so parallel generation is order-independent.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche, stable across platforms.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Folds a label and counters into a base seed.
pub fn derive(base: u64, label: &str, counters: &[u64]) -> u64 {
    let mut h = mix(base);
    for b in label.as_bytes() {
        h = mix(h ^ (*b as u64));
    }
    for c in counters {
        h = mix(h ^ *c);
    }
    h
}

/// RNG for a labeled substream of the run seed.
pub fn rng(base: u64, label: &str, counters: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, label, counters))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn derivation_is_stable_and_label_sensitive() {
        assert_eq!(derive(7, "shift", &[0]), derive(7, "shift", &[0]));
        assert_ne!(derive(7, "shift", &[0]), derive(7, "shift", &[1]));
        assert_ne!(derive(7, "shift", &[0]), derive(7, "split", &[0]));
        assert_ne!(derive(7, "shift", &[0]), derive(8, "shift", &[0]));
    }

    #[test]
    fn substreams_are_independent_of_query_order() {
        let a1 = rng(3, "x", &[5]).next_u64();
        let _ = rng(3, "x", &[9]).next_u64();
        let a2 = rng(3, "x", &[5]).next_u64();
        assert_eq!(a1, a2);
    }
}
