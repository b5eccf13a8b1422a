//! Derivation of independent, reproducible RNG seeds from a root seed.

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Seed for the stream identified by `tag` under `seed`.
pub fn derive(seed: u64, tag: &str) -> u64 {
    mix64(seed ^ mix64(fnv1a(tag.as_bytes())))
}

/// Seed for the `index`-th stream under `seed`.
pub fn derive_index(seed: u64, index: u64) -> u64 {
    mix64(seed ^ mix64(index ^ 0x5851_F42D_4C95_7F2D))
}
