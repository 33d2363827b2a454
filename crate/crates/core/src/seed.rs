//! Derived seeds for independent streams.

/// splitmix64 finaliser over a simple combination of `base`, `a` and `b`.
pub(crate) fn mix(base: u64, a: usize, b: usize) -> u64 {
    let mut z = base ^ (a as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (b as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
