//! Deterministic RNG stream derivation.
//!
//! Every randomized stage derives its own named stream from the single root
//! seed, so adding or reordering stages never perturbs unrelated ones.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive an independent RNG stream from `root` and a stable label.
pub fn stream(root: u64, label: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Like [`stream`] but additionally keyed by an index (per-scene, per-step, ...).
pub fn stream_n(root: u64, label: &str, n: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    h.update(n.to_le_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible() {
        let a: u64 = stream(7, "synth").gen();
        let b: u64 = stream(7, "synth").gen();
        assert_eq!(a, b);
    }

    #[test]
    fn labels_and_indices_separate_streams() {
        let a: u64 = stream(7, "synth").gen();
        let b: u64 = stream(7, "train").gen();
        let c: u64 = stream_n(7, "synth", 0).gen();
        let d: u64 = stream_n(7, "synth", 1).gen();
        assert_ne!(a, b);
        assert_ne!(c, d);
    }
}
