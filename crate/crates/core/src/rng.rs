//! Seed derivation for independent random streams.
//!
//! Every chain, replicate and generator owns its own `ChaCha8Rng`. Child
//! seeds are derived from a root seed and a path of integer labels with a
//! SplitMix64 finalizer applied after each label is folded in:
//!
//! ```text
//! h0 = mix(root)
//! h_{k+1} = mix(h_k ^ (label_k + GOLDEN * (k + 1)))
//! ```
//!
//! The derivation depends only on `(root, path)`, never on thread
//! scheduling, so results are identical at any thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `root` and a label path.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    let mut h = mix(root);
    for (k, &label) in path.iter().enumerate() {
        h = mix(h ^ label.wrapping_add(GOLDEN.wrapping_mul(k as u64 + 1)));
    }
    h
}

/// Stream labels used across the crate.
pub mod label {
    pub const DESIGN: u64 = 1;
    pub const TRUTH: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const CHAIN: u64 = 4;
}

pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn child_stream(root: u64, path: &[u64]) -> ChaCha8Rng {
    stream(derive_seed(root, path))
}
