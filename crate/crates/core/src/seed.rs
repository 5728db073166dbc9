//! Seed derivation.
//!
//! Every random stream is keyed by a tuple of integers, e.g. the view pair of
//! sample `i` in epoch `e` uses `mix(&[global_seed, e, i])`. The tuple is
//! folded through the SplitMix64 finaliser, so derived seeds depend on every
//! element and on their order.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a tuple of integers into a 64-bit seed.
pub fn mix(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(parts.len() as u64), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Stream tags, so different consumers of the same (seed, epoch, index)
/// never share a generator.
pub mod stream {
    pub const AUGMENT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const MASK: u64 = 3;
    pub const SUBSET: u64 = 4;
    pub const INIT: u64 = 5;
    pub const PROBE: u64 = 6;
    pub const SYNTH: u64 = 7;
}
