//! Seed derivation for independent, reproducible random streams.

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of stream `stream` under `base`. Distinct streams give unrelated
/// seeds; the mapping is fixed across platforms and releases.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    splitmix64(base ^ splitmix64(stream))
}

/// Like [`derive_seed`] with a textual tag, for naming pipeline stages.
pub fn derive_seed_tagged(base: u64, tag: &str, stream: u64) -> u64 {
    // FNV-1a over the tag bytes.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    derive_seed(base ^ h, stream)
}
