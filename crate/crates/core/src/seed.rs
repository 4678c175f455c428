//! Deterministic seed derivation.
//!
//! Every random draw in the crate comes from a [`SeedTree`] node. A node is a
//! 64-bit state; children are derived by mixing a label (hashed with FNV-1a)
//! or an integer index into the parent state with the SplitMix64 finalizer.
//! The generator for a node is ChaCha8 seeded with the node state, so a path
//! such as `root.child("regen").index(17).child("init")` names the same
//! stream on every machine.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label
        .bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SeedTree(u64);

impl SeedTree {
    pub fn new(root: u64) -> Self {
        SeedTree(splitmix(root))
    }

    pub fn child(self, label: &str) -> Self {
        SeedTree(splitmix(self.0 ^ fnv1a(label)))
    }

    pub fn index(self, i: u64) -> Self {
        SeedTree(splitmix(self.0 ^ i.wrapping_mul(GOLDEN).rotate_left(17)))
    }

    pub fn state(self) -> u64 {
        self.0
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn paths_are_stable_and_distinct() {
        let root = SeedTree::new(7);
        assert_eq!(root.child("a").index(3), SeedTree::new(7).child("a").index(3));
        assert_ne!(root.child("a"), root.child("b"));
        assert_ne!(root.index(0), root.index(1));
        assert_ne!(root.child("a").index(1), root.index(1).child("a"));
        let x: u64 = root.rng().random();
        let y: u64 = root.rng().random();
        assert_eq!(x, y);
    }
}
