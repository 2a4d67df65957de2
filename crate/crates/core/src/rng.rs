//! Named random substreams derived from one base seed.
//!
//! Every stream is ChaCha8 seeded with the base seed and a fixed stream id, so
//! adding draws to one stream never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    /// Parameter initialization.
    Init = 1,
    /// Synthetic dataset generation.
    Data = 2,
    /// Mini-batch shuffling.
    Shuffle = 3,
}

pub fn substream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
