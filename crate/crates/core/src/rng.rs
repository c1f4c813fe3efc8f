//! Seeded random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from the user
//! seed and a short path of integers (for example `[K, rep]`). Streams never
//! share state, so the order in which parallel tasks run has no effect on the
//! numbers they draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags, kept distinct so unrelated consumers never collide.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const SIMULATE: u64 = 2;
    pub const ORIENTATION: u64 = 3;
    pub const MODEL_SAMPLE: u64 = 4;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let id = path.iter().fold(0x5eed_u64, |acc, &p| splitmix(acc ^ splitmix(p)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}
