//! Seed derivation. Every random stream in the pipeline is seeded with
//! `derive_seed(top_level_seed, tag)`, where `tag` names the stage (and image
//! or object where needed), so that stages can be re-run independently.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, b| (h ^ *b as u64).wrapping_mul(FNV_PRIME))
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    splitmix64(seed ^ splitmix64(fnv1a(tag.as_bytes())))
}

/// Seed from a sequence of words, e.g. an image index and box coordinate bits.
pub fn derive_seed_words(seed: u64, words: &[u64]) -> u64 {
    words.iter().fold(splitmix64(seed), |h, w| splitmix64(h ^ w))
}
