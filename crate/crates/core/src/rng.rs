//! Seeded random streams. Every consumer derives its generator from the run
//! seed and a stream number, so parallel work is reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream numbers reserved for each consumer.
pub mod streams {
    pub const PRIOR_DRAW: u64 = 1;
    pub const FILTER: u64 = 2;
    pub const SIMULATION: u64 = 3;
    pub const COUNTS: u64 = 4;
    pub const PREDICTION_BASE: u64 = 1 << 32;
}
