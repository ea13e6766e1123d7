//! Counter-style seeded streams: every consumer derives its own ChaCha
//! stream from the run seed and a path of integers, so results never depend
//! on the order in which streams are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_PERMUTE: u64 = 1;
pub const TAG_DROPOUT: u64 = 2;
pub const TAG_PROJECT: u64 = 3;
pub const TAG_SAMPLE: u64 = 4;
pub const TAG_INIT: u64 = 5;
pub const TAG_DECODE: u64 = 6;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream keyed by `(seed, path)`.
pub fn rng_for(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stream = path
        .iter()
        .fold(0x5eed_u64, |h, p| splitmix(h ^ splitmix(*p)));
    rng.set_stream(stream);
    rng
}

/// Child seed for a sub-component (for example one expert among many).
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(seed), |h, p| {
        splitmix(h ^ p.wrapping_mul(0xd6e8_feb8_6659_fd93))
    })
}
