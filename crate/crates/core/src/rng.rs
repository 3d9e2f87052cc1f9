//! Seeded random streams.
//!
//! Every consumer derives its own ChaCha stream from a base seed and a tag
//! path, so results never depend on call order across images or threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Stream = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A stream keyed by `seed` and an ordered list of tags.
pub fn stream(seed: u64, tags: &[u64]) -> Stream {
    let mut key = splitmix(seed);
    for &t in tags {
        key = splitmix(key ^ splitmix(t));
    }
    ChaCha8Rng::seed_from_u64(key)
}

/// Short hex digest used to tag artifacts with the config that produced them.
pub fn hash_text(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
