//! Seed fan-out. Every stochastic component draws from its own ChaCha8
//! stream derived from a base seed plus a label, so adding a component never
//! shifts another component's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

/// Derive a child seed from `base` and a textual stream name.
pub fn derive_seed(base: u64, stream: &str) -> u64 {
    splitmix(base ^ splitmix(fnv1a(stream.as_bytes())))
}

/// Derive a child seed from `base`, a stream name and an index.
pub fn derive_indexed(base: u64, stream: &str, index: u64) -> u64 {
    splitmix(derive_seed(base, stream) ^ splitmix(index.wrapping_add(1)))
}

pub fn stream(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}
