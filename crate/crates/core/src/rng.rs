//! Counter-based random streams. Every random draw in the crate comes from a
//! stream keyed by `(seed, stream id)`, so results do not depend on the
//! order in which independent work items run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator for stream `id` under `seed`.
pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Sub-seed for a named purpose, so unrelated consumers of one master seed
/// never share a stream.
pub fn derive(seed: u64, label: &str) -> u64 {
    hash_str(seed, label)
}

/// Stable 64-bit hash of `s` under `seed`: FNV-1a folded through splitmix64.
pub fn hash_str(seed: u64, s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix(seed ^ h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
