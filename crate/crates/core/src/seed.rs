//! Root-seed splitting.
//!
//! Sub-seed `k` of root `r` is the SplitMix64 output for state
//! `r + (k + 1) * 0x9E37_79B9_7F4A_7C15` (wrapping). Streams of distinct `k`
//! are decorrelated, and the mapping depends only on `(r, k)`.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sub_seed(root: u64, stream: u64) -> u64 {
    mix(root.wrapping_add(stream.wrapping_add(1).wrapping_mul(GOLDEN)))
}
