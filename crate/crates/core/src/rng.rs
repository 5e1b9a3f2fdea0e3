//! Seed derivation. Every random draw in the pipeline comes from a ChaCha
//! stream whose seed is a pure function of a base seed and a tag path, so
//! results do not depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_for(base: u64, tags: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, tags))
}

pub mod tag {
    pub const SPEAKER: u64 = 1;
    pub const UTTERANCE: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const INIT: u64 = 10;
    pub const SAMPLER: u64 = 11;
    pub const MASK: u64 = 12;
    pub const NEGATIVES: u64 = 13;
    pub const DROPOUT_SSL: u64 = 14;
    pub const DROPOUT_CLS: u64 = 15;
    pub const DROPOUT_HEAD: u64 = 16;
    pub const EXPANSION: u64 = 20;
    pub const GRADCHECK: u64 = 30;
}
