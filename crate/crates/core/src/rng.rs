//! Counter-based seed derivation: every stage and worker gets its own
//! ChaCha stream derived from one user seed, independent of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stage tags used with [`stream`].
pub mod tag {
    pub const RESTART: u64 = 0x5245_5354;
    pub const SUBJECT: u64 = 0x5355_424a;
    pub const ROTATION: u64 = 0x524f_5441;
    pub const BOOTSTRAP: u64 = 0x424f_4f54;
    pub const COMPONENT: u64 = 0x434f_4d50;
    pub const REPLICATION: u64 = 0x5245_504c;
    pub const KMEANS: u64 = 0x4b4d_4541;
    pub const SELECT: u64 = 0x5345_4c45;
    pub const SPECTRAL: u64 = 0x5350_4543;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `(seed, tag, index)`.
pub fn derive(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix(splitmix(seed ^ splitmix(tag)) ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag, index))
}
