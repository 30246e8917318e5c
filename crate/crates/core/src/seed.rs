//! Deterministic seed derivation.
//!
//! Every stochastic stage draws from a ChaCha8 stream seeded with a value
//! derived from the master seed and the stage coordinates, so any single
//! (level, draw) can be recomputed in isolation and parallel execution order
//! never changes results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const MIX_MUL_1: u64 = 0xBF58_476D_1CE4_E5B9;
const MIX_MUL_2: u64 = 0x94D0_49BB_1331_11EB;

/// Stage tags passed as the last argument of [`derive_seed`].
pub mod stage {
    pub const GENERATE: u64 = 1;
    pub const FEATURES: u64 = 2;
    pub const PROBE: u64 = 3;
    pub const DRAW: u64 = 4;
    pub const INIT: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const EVAL: u64 = 7;
    pub const FAMILY: u64 = 8;
    pub const RETRY: u64 = 9;
}

/// splitmix64 finalizer: a bijective 64-bit avalanche mix.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(MIX_MUL_1);
    z = (z ^ (z >> 27)).wrapping_mul(MIX_MUL_2);
    z ^ (z >> 31)
}

/// Folds the four coordinates into the state one at a time, each step adding
/// the golden-ratio increment before mixing. Constants are fixed; outputs are
/// stable across versions.
///
/// `derive_seed(0, 0, 0, 0)` is `0x3b9d_11eb_5585_6baf`.
pub fn derive_seed(master: u64, level: u64, draw: u64, stage_tag: u64) -> u64 {
    let mut h = mix64(master.wrapping_add(GOLDEN_GAMMA));
    for v in [level, draw, stage_tag] {
        h = mix64(h ^ mix64(v.wrapping_add(GOLDEN_GAMMA)));
    }
    h
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn pinned_zero_vector() {
        assert_eq!(derive_seed(0, 0, 0, 0), 0x3b9d_11eb_5585_6baf);
    }

    #[test]
    fn same_inputs_same_output() {
        assert_eq!(derive_seed(42, 3, 7, 4), derive_seed(42, 3, 7, 4));
    }

    #[test]
    fn single_coordinate_changes_never_collide() {
        let mut rng = rng_from_seed(99);
        use rand::Rng;
        for _ in 0..10_000 {
            let t: [u64; 4] = [rng.random(), rng.random::<u64>() % 64, rng.random::<u64>() % 64, rng.random::<u64>() % 16];
            let base = derive_seed(t[0], t[1], t[2], t[3]);
            for k in 0..4 {
                let mut u = t;
                u[k] = u[k].wrapping_add(1 + (rng.random::<u64>() % 1000));
                assert_ne!(base, derive_seed(u[0], u[1], u[2], u[3]), "collision at {t:?} coord {k}");
            }
        }
    }

    #[test]
    fn grid_of_seeds_is_collision_free() {
        let mut seen = HashSet::new();
        for level in 0..20 {
            for draw in 0..50 {
                for tag in 0..10 {
                    assert!(seen.insert(derive_seed(7, level, draw, tag)));
                }
            }
        }
    }
}
