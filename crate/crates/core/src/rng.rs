//! Deterministic random streams.
//!
//! Every stochastic choice draws from a ChaCha8 generator keyed by the run
//! seed plus a stream id, so parameter init, shuffling, augmentation and
//! dataset synthesis never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Flip = 3,
    Crop = 4,
    Synth = 5,
    EvalSample = 6,
}

/// Generator for `(seed, stream, index)`. `index` separates sub-streams such
/// as epochs.
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 40) | (index & ((1 << 40) - 1)));
    rng
}
