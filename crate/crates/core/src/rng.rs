//! Deterministic seed derivation.
//!
//! All randomized components (tree fitting, bootstrap resampling, simulation
//! replicates, train/test splits) consume a `ChaCha8Rng` seeded through
//! [`derive_seed`]. Work items derive their own seed from a master seed and a
//! stream tag, so results are independent of thread scheduling: running with
//! one thread or many produces bit-identical output.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a master seed and a stream tag.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    splitmix64(master ^ splitmix64(stream.wrapping_add(0x515_7AF5)))
}

/// Derive a child seed from a master seed and two stream tags.
pub fn derive_seed2(master: u64, a: u64, b: u64) -> u64 {
    derive_seed(derive_seed(master, a), b)
}

/// A ChaCha stream seeded from a derived seed.
pub fn stream_rng(master: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_across_streams() {
        let a = derive_seed(42, 0);
        let b = derive_seed(42, 1);
        let c = derive_seed(43, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        // stable across calls
        assert_eq!(a, derive_seed(42, 0));
    }

    #[test]
    fn two_level_derivation_does_not_collide_with_one_level() {
        let direct = derive_seed(7, 3);
        let nested = derive_seed2(7, 3, 0);
        assert_ne!(direct, nested);
    }
}
