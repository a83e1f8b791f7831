//! Reproducible random streams.
//!
//! Every path owns a ChaCha8 stream selected by `(key, path index)`; ChaCha is
//! a counter-based generator, so the stream of path `n` does not depend on how
//! many other paths exist or which worker simulates it. Independent families of
//! streams (driving noise, Brownian-bridge refinement, bootstrap resampling) are
//! separated by mixing a tag into the key.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type PathRng = ChaCha8Rng;

/// Stream tags keep unrelated consumers of the same experiment seed apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamTag {
    Driving = 0x6472_6976,
    Bridge = 0x6272_6467,
    Bootstrap = 0x626f_6f74,
    Mixture = 0x6d69_7874,
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and an integer label.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    mix64(mix64(seed) ^ label.wrapping_mul(0xd6e8_feb8_6659_fd93))
}

/// The stream for path `index` in the family `tag` of experiment `seed`.
pub fn path_stream(seed: u64, tag: StreamTag, index: u64) -> PathRng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, tag as u64));
    rng.set_stream(index);
    rng
}
