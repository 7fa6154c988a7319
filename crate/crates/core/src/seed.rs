//! Stable seed derivation.
//!
//! Every random stream in the crate is keyed off a parent seed plus a label,
//! so results do not depend on scheduling order or on how many streams were
//! drawn before.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Something that can key a derived seed.
pub trait SeedKey {
    fn key(&self) -> u64;
}

impl SeedKey for u64 {
    fn key(&self) -> u64 {
        splitmix64(*self ^ 0x5EED)
    }
}

impl SeedKey for usize {
    fn key(&self) -> u64 {
        (*self as u64).key()
    }
}

impl SeedKey for &str {
    fn key(&self) -> u64 {
        fnv1a(self.as_bytes())
    }
}

impl SeedKey for String {
    fn key(&self) -> u64 {
        self.as_str().key()
    }
}

/// Derive a child seed from `parent` and `key`.
pub fn derive(parent: u64, key: impl SeedKey) -> u64 {
    splitmix64(splitmix64(parent) ^ key.key().rotate_left(17))
}

/// Derive along a path of keys, e.g. `(replicate, "forest", regime)`.
pub fn derive_path(parent: u64, keys: &[&dyn SeedKey]) -> u64 {
    keys.iter()
        .fold(parent, |s, k| splitmix64(splitmix64(s) ^ k.key().rotate_left(17)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
