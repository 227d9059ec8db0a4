//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! (counter-based) keyed by a hash of a master seed and a stream index, so
//! streams are order-independent.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// `hash(master, index)`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

pub fn stream(master: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, index))
}

/// Named sub-streams used by the model and trainer.
pub mod streams {
    pub const INIT_GENERATOR: u64 = 1;
    pub const INIT_DISCRIMINATOR: u64 = 2;
    pub const INIT_EXTRACTOR: u64 = 3;
    pub const BATCH_ORDER: u64 = 4;
    pub const AUGMENT: u64 = 5;
    pub const SPECTRAL: u64 = 6;
    pub const SPLIT: u64 = 7;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u32> = stream(42, 3).sample_iter(rand::distributions::Standard).take(4).collect();
        let b: Vec<u32> = stream(42, 3).sample_iter(rand::distributions::Standard).take(4).collect();
        let c: Vec<u32> = stream(42, 4).sample_iter(rand::distributions::Standard).take(4).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(derive_seed(1, 2), derive_seed(2, 1));
        let _ = stream(0, 0).gen::<f64>();
    }
}
