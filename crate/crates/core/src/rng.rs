//! Named, seeded random streams.
//!
//! Every random draw in the crate goes through [`substream`], so a single
//! user-facing seed fans out into independent, reproducible streams
//! (`"data"`, `"init"`, `"shuffle"`, `"verify"`, ...).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

/// FNV-1a over the stream name.
fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the seed of a named sub-stream.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    mix(seed ^ mix(name_hash(name)))
}

/// A deterministic RNG for the named sub-stream of `seed`.
pub fn substream(seed: u64, name: &str) -> LabRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, name))
}
