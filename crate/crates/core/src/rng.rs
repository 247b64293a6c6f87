//! Seed plumbing. Every stochastic component draws from a ChaCha stream whose
//! seed is derived from the run seed plus a tag path, so results do not depend
//! on call order across components.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `tags` into `base`, yielding a well-spread child seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(base), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn rng_from(base: u64, tags: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, tags))
}

/// Stable tags for the independent random streams of a run.
pub mod stream {
    pub const PARTITION: u64 = 1;
    pub const SAMPLE: u64 = 2;
    pub const LOCAL: u64 = 3;
    pub const INIT: u64 = 4;
    pub const INVERT: u64 = 5;
    pub const POLICY: u64 = 6;
    pub const SPLIT: u64 = 7;
    pub const EXTRACTOR: u64 = 8;
    pub const ADVERSARY: u64 = 9;
    pub const SERVER: u64 = 10;
}
