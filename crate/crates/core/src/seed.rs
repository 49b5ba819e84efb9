//! Stable seeding helpers. Everything random in the crate derives from a
//! `u64` seed and a string key through these functions, so results do not
//! depend on the standard library's hasher or on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Combines a seed and a key into a new seed.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    let mut h = fnv1a64(&seed.to_le_bytes());
    for &b in key.as_bytes() {
        h = (h ^ b as u64).wrapping_mul(FNV_PRIME);
    }
    // final avalanche (splitmix64 finalizer)
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

pub fn rng_for(seed: u64, key: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, key))
}
