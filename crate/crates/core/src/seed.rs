//! Counter-based seed derivation.

/// SplitMix64 finalizer.
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a base seed and a counter.
#[inline]
pub fn mix(seed: u64, counter: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ counter.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Seed keyed by a pair of counters, e.g. (trial, vertex).
#[inline]
pub fn mix2(seed: u64, a: u64, b: u64) -> u64 {
    mix(mix(seed, a), b)
}
