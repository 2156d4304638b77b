//! Deterministic RNG stream derivation.
//!
//! Every stochastic component draws from a ChaCha stream derived from the
//! master seed plus a stream label, so independent subsystems (init, epoch
//! shuffles, augmentation, attacks) never share or perturb each other's
//! randomness.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream labels; values are part of the reproducibility contract.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    ModelInit = 1,
    BetaInit = 2,
    EpochShuffle = 3,
    Vicinity = 4,
    Attack = 5,
    Data = 6,
    Eval = 7,
}

pub fn stream_rng(master_seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(((stream as u64) << 32) ^ index);
    rng
}
