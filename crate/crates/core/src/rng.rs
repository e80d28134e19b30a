//! Reproducible random streams.
//!
//! Every consumer derives its generator from `(seed, index, purpose)` so that
//! results never depend on iteration or thread order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent ChaCha stream for sample/step `index` and a purpose tag.
pub fn stream_rng(seed: u64, index: u64, purpose: u8) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((index << 8) | purpose as u64);
    rng
}

/// Purpose tags used across the crate.
pub mod purpose {
    pub const PHANTOM: u8 = 0;
    pub const NOISE: u8 = 1;
    pub const INIT: u8 = 2;
    pub const SHUFFLE: u8 = 3;
    pub const TRAIN_NOISE: u8 = 4;
    pub const PROPAGATE: u8 = 5;
    pub const PREDICT: u8 = 6;
}
