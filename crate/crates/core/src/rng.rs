//! Deterministic random streams.
//!
//! Every replicate owns a ChaCha8 stream derived from `(seed, tag, index)`,
//! so results do not depend on scheduling. Edge displacements use a keyed
//! counter hash instead of a sequential stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform in `[0, 1)` keyed by `(key, id)`.
#[inline]
pub fn keyed_uniform(key: u64, id: u64) -> f64 {
    let h = mix64(key ^ mix64(id));
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Stable 64-bit tag for a string label.
pub fn tag(label: &str) -> u64 {
    label
        .bytes()
        .fold(0xCBF2_9CE4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01B3))
}

/// RNG stream for replicate `index` of the experiment labelled `tag`.
pub fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed) ^ tag);
    rng.set_stream(index);
    rng
}
