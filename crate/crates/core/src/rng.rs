//! Seed derivation. Every random stream in the toolkit is a ChaCha8 generator
//! seeded from a `u64`, so runs are reproducible across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sub-stream seed for job `index` under `master`.
pub fn derive(master: u64, index: u64) -> u64 {
    master.wrapping_add(index)
}

/// Sub-stream seed for a named purpose, so that e.g. the split and the
/// training stream of one shadow never coincide.
pub fn derive_tagged(master: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, mixed with the master seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix(master ^ h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
