//! Seeded random streams. Each consumer of randomness draws from its own
//! stream so that adding draws in one place never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// Stream ids. Data generation.
pub const DATA_LABELS: u64 = 1;
pub const DATA_SHUFFLE: u64 = 2;
pub const DATA_COMMON_CAUSE: u64 = 3;
pub const DATA_COLOUR2: u64 = 4;
pub const DATA_IMAGE_SWAP: u64 = 5;

// Training.
pub const CRITIC_INIT: u64 = 20;
pub const MODEL_LOADER: u64 = 21;
pub const CRITIC_LOADER: u64 = 22;
pub const CRITIC_PLANS: u64 = 23;
pub const MODEL_PLANS: u64 = 24;
/// Model `i` of a collection is initialized from stream `MODEL_INIT_BASE + i`.
pub const MODEL_INIT_BASE: u64 = 1000;
