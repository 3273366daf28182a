//! Seed derivation.
//!
//! Every random draw in the crate comes from a `ChaCha8Rng` whose seed is a
//! stable hash of the caller's coordinates, so results never depend on
//! iteration order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One round of the splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a list of words into a single well-mixed seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x6A09_E667_F3BC_C908, |acc, &p| mix64(acc ^ mix64(p)))
}

pub fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

/// Domain tags keep seeds of unrelated draws apart.
pub mod tag {
    pub const SCENE: u64 = 0x5343_454E;
    pub const RENDER: u64 = 0x5245_4E44;
    pub const SOURCE: u64 = 0x534F_5552;
    pub const DATASET: u64 = 0x4441_5441;
    pub const NOISE: u64 = 0x4E4F_4953;
    pub const INIT: u64 = 0x494E_4954;
    pub const TRAIN: u64 = 0x5452_4149;
    pub const FOLDS: u64 = 0x464F_4C44;
    pub const SPLIT: u64 = 0x5350_4C54;
    pub const TRAJ: u64 = 0x5452_414A;
    pub const SCORE: u64 = 0x5343_4F52;
    pub const COND: u64 = 0x434F_4E44;
    pub const VALID: u64 = 0x5641_4C44;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derived_seeds_are_stable_and_order_sensitive() {
        assert_eq!(derive_seed(&[1, 2, 3]), derive_seed(&[1, 2, 3]));
        assert_ne!(derive_seed(&[1, 2, 3]), derive_seed(&[3, 2, 1]));
        assert_ne!(derive_seed(&[0]), derive_seed(&[0, 0]));
        let a: u64 = rng_for(&[7]).random();
        let b: u64 = rng_for(&[7]).random();
        assert_eq!(a, b);
    }
}
