//! Seeded random streams.
//!
//! Every stochastic step (toy data, perturbation, shuffling, init) draws from a
//! ChaCha stream addressed by `(seed, stream)`, so results do not depend on the
//! order in which work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Packs up to three small indices into one stream id.
pub fn stream_id(domain: u16, a: u32, b: u32) -> u64 {
    ((domain as u64) << 48) ^ ((a as u64) << 24) ^ (b as u64)
}

/// FNV-1a, used to key parameter initialization by tensor name.
pub fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
