//! Deterministic RNG streams derived from a root seed.
//!
//! Every stochastic component draws from a `ChaCha8Rng` keyed by the root
//! seed plus a tag path, so independent pieces of work (samples, trials,
//! channel draws) get independent streams that are reproducible regardless
//! of scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for stream derivation. Values are arbitrary but fixed.
pub mod tag {
    pub const WORLD: u64 = 0x01;
    pub const MODEL_INIT: u64 = 0x02;
    pub const ACTOR_INIT: u64 = 0x03;
    pub const SHUFFLE: u64 = 0x04;
    pub const TRAIN_STEP: u64 = 0x05;
    pub const SWEEP: u64 = 0x06;
    pub const COND_SAMPLE: u64 = 0x07;
    pub const SUB_CHANNEL: u64 = 0x08;
    pub const LATENT_SAMPLE: u64 = 0x09;
    pub const TASK_CHANNEL: u64 = 0x0a;
    pub const SNR_PICK: u64 = 0x0b;
    pub const PAIRED: u64 = 0x0c;
    pub const HOLDOUT: u64 = 0x0d;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a root seed with a tag path into a single stream key.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    let mut state = splitmix64(seed);
    for &t in tags {
        state = splitmix64(state ^ splitmix64(t));
    }
    state
}

/// Fresh ChaCha8 stream for (seed, tag path).
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tags))
}
