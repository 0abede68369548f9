//! Seed derivation shared by every seeded component.
//!
//! Child seeds are derived with a splitmix64 finalizer so that each
//! sub-structure, slice or epoch gets an independent stream no matter in
//! which order the work is executed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `child_seed = splitmix64(seed ^ splitmix64(index))`.
pub fn mix(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index))
}

/// Deterministic generator for a seed.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for the `index`-th child stream of `seed`.
pub fn child_rng(seed: u64, index: u64) -> ChaCha8Rng {
    rng(mix(seed, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn children_differ() {
        assert_ne!(mix(7, 0), mix(7, 1));
        assert_ne!(mix(7, 0), mix(8, 0));
        assert_eq!(mix(7, 3), mix(7, 3));
    }
}
