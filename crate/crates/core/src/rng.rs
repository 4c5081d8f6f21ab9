//! Named random sub-streams derived from a single run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random streams. Every consumer of randomness draws from its
/// own stream so ablations differ only in the ablated factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Split = 2,
    Validation = 3,
    Init = 4,
    LabeledBatch = 5,
    UnlabeledBatch = 6,
    AnchorSampling = 7,
    BankSampling = 8,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
