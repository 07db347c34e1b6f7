//! Deterministic seed streams.
//!
//! Every random draw in the crate comes from a `ChaCha8Rng` whose seed is a
//! pure function of a base seed and a list of integer tags, so results do not
//! depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `tags` into `base`, yielding an independent-looking child seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_from(base: u64, tags: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

// Stream tags. Kept distinct so that e.g. mask draws never correlate with
// group draws for the same sample.
pub(crate) const TAG_MASK: u64 = 0x6d61_736b;
pub(crate) const TAG_NOISE: u64 = 0x6e6f_6973;
pub(crate) const TAG_GROUP: u64 = 0x6772_6f75;
pub(crate) const TAG_SPLIT: u64 = 0x7370_6c69;
pub(crate) const TAG_SHUFFLE: u64 = 0x7368_7566;
pub(crate) const TAG_INIT: u64 = 0x696e_6974;
pub(crate) const TAG_EVAL: u64 = 0x6576_616c;
pub(crate) const TAG_PHANTOM: u64 = 0x7068_616e;
