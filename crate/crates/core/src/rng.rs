//! Named, counter-style random streams.
//!
//! Every random draw in the pipeline comes from a stream keyed by
//! `(base seed, tag, a, b)`, so results never depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derive a 64-bit sub-seed from a base seed, a tag and two integer keys.
pub fn derive_seed(base: u64, tag: &str, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(base ^ fnv1a(tag));
    h = splitmix64(h ^ a.wrapping_mul(0xA24B_AED4_963E_E407));
    splitmix64(h ^ b.wrapping_mul(0x9FB2_1C65_1E98_DF25))
}

pub fn stream(base: u64, tag: &str, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag, a, b))
}
