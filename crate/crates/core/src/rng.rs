//! Seed derivation.
//!
//! Every stochastic routine takes an explicit RNG. Independent streams are
//! derived from a root seed by hashing a path of indices (epoch, window,
//! lane, trial chunk, ...), so a draw never depends on how work is split
//! across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used throughout the crate.
pub type Rng = ChaCha8Rng;

/// A node in a tree of derived seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedTree(u64);

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        SeedTree(seed)
    }

    pub fn seed(&self) -> u64 {
        self.0
    }

    /// Child stream `index` of this node.
    pub fn child(&self, index: u64) -> SeedTree {
        SeedTree(splitmix64(splitmix64(self.0) ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93)))
    }

    /// Follow a path of child indices.
    pub fn path(&self, indices: &[u64]) -> SeedTree {
        indices.iter().fold(*self, |node, &i| node.child(i))
    }

    pub fn rng(&self) -> Rng {
        Rng::seed_from_u64(self.0)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
