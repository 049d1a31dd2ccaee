//! Seeded random streams.
//!
//! All randomness in the crate flows through ChaCha8 generators created
//! here. A run seed fans out into independent named streams (init, noise,
//! data order, synthetic data) plus one substream per (condition, sample)
//! pair in the sampler, so concurrent units never share a stream and every
//! output is reproducible from the seed alone.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream ids for the fixed per-run streams.
pub const STREAM_INIT: u64 = 0;
pub const STREAM_NOISE: u64 = 1;
pub const STREAM_DATA: u64 = 2;
pub const STREAM_SYNTH: u64 = 3;

/// Base offset for sampler substreams, far away from the fixed streams.
const SAMPLER_STREAM_BASE: u64 = 1 << 32;

/// Generator for one of the fixed per-run streams.
pub fn stream(seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// Generator for the sampler substream of one (condition, sample) pair.
///
/// Every pair gets its own stream so samples are independent of each other
/// and of how the work is scheduled across threads.
pub fn sampler_stream(seed: u64, cond_index: u64, sample_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SAMPLER_STREAM_BASE + cond_index * 4096 + sample_index);
    rng
}

/// `n` standard-normal draws.
pub fn randn_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
