//! Random streams and deterministic seed derivation.
//!
//! Every random quantity in a run is drawn from a `RngStream` whose seed is
//! `derive_seed(master, cell, replication, stream)`. The mixer is the
//! SplitMix64 finaliser applied after absorbing each input word:
//!
//! ```text
//! h₀ = mix(master ⊕ 0x9E3779B97F4A7C15)
//! hₖ = mix(hₖ₋₁ + 0x9E3779B97F4A7C15 ⊕ inputₖ)      for cell, replication, stream
//! mix(z) = z ⊕ (z≫31) after z ← (z ⊕ z≫30)·0xBF58476D1CE4E5B9, z ← (z ⊕ z≫27)·0x94D049BB133111EB
//! ```

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The random stream type used throughout the crate.
pub type RngStream = ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Sub-stream tags passed as the `stream` argument of [`derive_seed`].
pub mod streams {
    /// Nested sampler (prior draws, kernel draws).
    pub const SAMPLER: u64 = 0;
    /// Random observation draws.
    pub const OBSERVATION: u64 = 1;
    /// Inner pools for link-norm estimation.
    pub const POOL: u64 = 2;
    /// Chi-square statistic draws.
    pub const CHI_SQUARE: u64 = 3;
    /// Base seed reported for a cell.
    pub const CELL: u64 = 4;
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic 64-bit seed for one (cell, replication, stream) of a run.
pub fn derive_seed(master: u64, cell_index: u64, rep_index: u64, stream: u64) -> u64 {
    let mut h = mix64(master ^ GOLDEN_GAMMA);
    for word in [cell_index, rep_index, stream] {
        h = mix64(h.wrapping_add(GOLDEN_GAMMA) ^ word);
    }
    h
}

pub fn stream_from_seed(seed: u64) -> RngStream {
    RngStream::seed_from_u64(seed)
}

/// Independent sub-stream `index` keyed by `base`. Uses ChaCha's 64-bit
/// stream id, so sub-streams never overlap.
pub fn substream(base: u64, index: u64) -> RngStream {
    let mut rng = RngStream::seed_from_u64(base);
    rng.set_stream(index);
    rng
}

/// Draws a fresh base word from `rng` for keying sub-streams.
pub fn next_base(rng: &mut RngStream) -> u64 {
    rng.next_u64()
}
