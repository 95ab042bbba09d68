//! Seeded random streams.
//!
//! Every stream is ChaCha8 keyed from a 64-bit seed through
//! `SeedableRng::seed_from_u64` (PCG32 key expansion), with the ChaCha stream
//! word selecting an independent substream. `(seed, stream)` fully determines
//! the output, so sweeps can hand each cell its own stream without sharing
//! generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
