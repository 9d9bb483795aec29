//! Seed derivation. Every random stream in a run is keyed by the run seed
//! plus a fixed path of integers (round, client, purpose), so streams never
//! depend on the order in which other streams were consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a base seed with a path of stream identifiers.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream tags for `derive_seed` paths.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const RANDOM_MASK: u64 = 3;
    pub const DATA: u64 = 4;
    pub const PARTITION: u64 = 5;
}
