//! Named deterministic RNG streams.
//!
//! Every random choice in the framework flows from a single root seed. A
//! stream is addressed by a human-readable name (`"init"`, `"partition"`,
//! `"gate:3"`, `"perturb:0.01:7"`, …); the name and the root seed are hashed
//! into a ChaCha8 key, so streams are independent, order-free and stable
//! across platforms and thread counts.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Root seed plus a derivation scheme for named sub-streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    root: u64,
}

impl SeedTree {
    pub fn new(root: u64) -> Self {
        SeedTree { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// Deterministic RNG for the named stream.
    pub fn stream(&self, name: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.root.to_le_bytes());
        h.update([0x1f]); // domain separator between seed and name
        h.update(name.as_bytes());
        let digest = h.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(key)
    }

    /// Stream scoped to one student index (gates, batch shuffles, dropout).
    pub fn student_stream(&self, base: &str, student: usize) -> ChaCha8Rng {
        self.stream(&format!("{base}:{student}"))
    }
}
