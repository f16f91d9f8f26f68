//! Hierarchical seed derivation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives an independent child seed from a parent seed and a tag.
pub fn derive_seed(parent: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    h.update(tag.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn child_rng(parent: u64, tag: &str) -> ChaCha8Rng {
    rng(derive_seed(parent, tag))
}

/// The independent randomness sources of one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSeeds {
    pub split: u64,
    pub init: u64,
    pub shuffle: u64,
    pub bootstrap: u64,
    pub pretrain: u64,
    pub embedding: u64,
}

impl RunSeeds {
    pub fn from_root(root: u64) -> Self {
        RunSeeds {
            split: derive_seed(root, "split"),
            init: derive_seed(root, "init"),
            shuffle: derive_seed(root, "shuffle"),
            bootstrap: derive_seed(root, "bootstrap"),
            pretrain: derive_seed(root, "pretrain"),
            embedding: derive_seed(root, "embedding"),
        }
    }
}
