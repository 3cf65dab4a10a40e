//! Seeded random streams.
//!
//! Every stochastic component draws from its own ChaCha stream derived from
//! `(seed, stream, index)`, so results never depend on the order in which
//! independent pieces of work are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags. Distinct tags give statistically independent sequences for
/// the same seed.
pub mod stream {
    pub const CATALOG_CATEGORY: u64 = 1;
    pub const CATALOG_BRAND: u64 = 2;
    pub const CATALOG_ATTRS: u64 = 3;
    pub const CATALOG_PRICE: u64 = 4;
    pub const CATALOG_POPULARITY: u64 = 5;
    pub const SESSION: u64 = 10;
    pub const SPLIT: u64 = 11;
    pub const KMEANS: u64 = 20;
    pub const POLICY_INIT: u64 = 30;
    pub const SHUFFLE: u64 = 31;
    pub const ROLLOUT: u64 = 40;
    pub const RL_SAMPLE: u64 = 41;
    pub const BOOTSTRAP: u64 = 50;
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// RNG for stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// RNG for the `index`-th independent work item of a stream.
pub fn indexed_rng(seed: u64, stream: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(index)));
    rng.set_stream(stream);
    rng
}

/// Derive a child seed, e.g. per training stage.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    splitmix(seed.wrapping_add(splitmix(salt)))
}
