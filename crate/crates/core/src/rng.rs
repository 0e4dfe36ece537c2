use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent RNG stream derived from a base seed and a path of stream ids,
/// e.g. `(seed, [STREAM_FEATURES, block_index])`.
pub fn derived_rng(seed: u64, stream: &[u64]) -> ChaCha8Rng {
    let mut s = splitmix64(seed);
    for &k in stream {
        s = splitmix64(s ^ splitmix64(k));
    }
    ChaCha8Rng::seed_from_u64(s)
}

pub(crate) const STREAM_SCENE: u64 = 1;
pub(crate) const STREAM_CENTERS: u64 = 2;
pub(crate) const STREAM_AUGMENT: u64 = 3;
pub(crate) const STREAM_FEATURES: u64 = 4;
