//! Seed derivation. Every random draw in a run comes from a stream keyed by
//! the master seed plus a path of indices (step, chunk, purpose), so results
//! do not depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `parts` into `seed`.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, parts))
}

/// Purpose tags used as the last element of a derivation path.
pub mod purpose {
    pub const POLICY_INIT: u64 = 1;
    pub const CRITIC_INIT: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const PAIR_BATCH: u64 = 4;
    pub const PENALTY_MIX: u64 = 5;
    pub const SHUFFLE: u64 = 6;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn paths_are_distinct_and_stable() {
        assert_eq!(derive_seed(7, &[1, 2]), derive_seed(7, &[1, 2]));
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
        assert_ne!(derive_seed(7, &[1]), derive_seed(8, &[1]));
        let a: u64 = stream(3, &[4]).gen();
        let b: u64 = stream(3, &[4]).gen();
        assert_eq!(a, b);
    }
}
