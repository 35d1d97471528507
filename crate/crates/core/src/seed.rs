//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a 64-bit seed obtained by mixing a master seed with stream tags.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `master` and an ordered list of tags.
pub fn derive(master: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix64(master), |acc, &t| mix64(acc ^ mix64(t)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// Stream tags keep unrelated consumers of one master seed apart.
pub(crate) const TAG_ENCODER: u64 = 0x656e_636f;
pub(crate) const TAG_FEATURES: u64 = 0x6665_6174;
pub(crate) const TAG_HEAD: u64 = 0x6865_6164;
pub(crate) const TAG_SEG_STATE: u64 = 0x7365_6773;
pub(crate) const TAG_PERTURB: u64 = 0x7065_7274;
pub(crate) const TAG_DATASET: u64 = 0x6461_7461;
pub(crate) const TAG_TRIAL: u64 = 0x7472_6961;
pub(crate) const TAG_SAMPLE: u64 = 0x7361_6d70;
