//! Named seed derivation. Every random stream in the pipeline is derived
//! from the root seed and a stable textual key, so results do not depend on
//! scheduling or iteration order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the stream named `key` under `seed`.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    let mut h = FNV_OFFSET ^ splitmix(seed);
    for b in key.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix(h)
}

pub fn rng_for(seed: u64, key: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, key))
}

/// Stable 64-bit hash of a string, for hashed features and split assignment.
pub fn stable_hash(key: &str) -> u64 {
    derive_seed(0, key)
}
