//! Seeded generator derivation. Every random stream in the crate is a ChaCha8
//! generator identified by a `(seed, stream)` pair.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

// Stream tags. Kept disjoint so that, e.g., the initial noise of a trajectory
// never depends on how many negative prompts were drawn.
pub(crate) const STREAM_INITIAL_NOISE: u64 = 0;
pub(crate) const STREAM_NEGATIVE: u64 = 1;
pub(crate) const STREAM_CONTENT_EMBED: u64 = 2 << 32;
pub(crate) const STREAM_STYLE_EMBED: u64 = 3 << 32;
pub(crate) const STREAM_TOY_LAYOUT: u64 = 4 << 32;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
