//! Deterministic seed derivation so parallel work never depends on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of integers, e.g. `(frame, object, iteration, purpose)`.
pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Purpose tags for [`derive`].
pub mod purpose {
    pub const PROXY_SIZE: u64 = 1;
    pub const PROXY_SURFACE: u64 = 2;
    pub const CATALOG_PICK: u64 = 3;
    pub const CROP: u64 = 4;
    pub const MIX: u64 = 5;
    pub const TRAIN: u64 = 6;
    pub const SCENE: u64 = 7;
}
