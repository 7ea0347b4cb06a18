//! Seeded random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from the root
//! seed plus a stream name and index, so components can be re-run in
//! isolation and parallel work stays identical to serial execution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over `bytes`, continuing from `state`.
pub fn fnv1a(state: u64, bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(state, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

pub fn fnv1a_str(s: &str) -> u64 {
    fnv1a(FNV_OFFSET, s.as_bytes())
}

/// SplitMix64 finalizer.
pub fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derive a 64-bit sub-seed for the named stream.
pub fn derive_seed(root: u64, stream: &str, index: u64) -> u64 {
    let h = fnv1a(fnv1a_str(stream), &root.to_le_bytes());
    splitmix(fnv1a(h, &index.to_le_bytes()))
}

pub fn stream(root: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(root, name, index))
}
