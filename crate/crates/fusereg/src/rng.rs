//! Reproducible random number streams.
//!
//! Everything stochastic in this crate is driven by ChaCha8, a counter-based
//! generator: a single user seed plus a stream index yields an independent
//! substream, so simulation replicates and bootstrap resamples can run in
//! any order (or in parallel) and still reproduce bit-identically.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used throughout the crate.
pub type StreamRng = ChaCha8Rng;

/// Derive the independent substream `stream` of the generator seeded by
/// `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
