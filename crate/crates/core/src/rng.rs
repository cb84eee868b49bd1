//! Seeded random streams.
//!
//! Every stream is a ChaCha8 keystream: the 64-bit seed is expanded to a
//! 256-bit key (`SeedableRng::seed_from_u64`) and the ChaCha stream id
//! selects one of 2^64 independent keystreams under that key. A stream is
//! therefore fully identified by `(seed, index)`, which is what lets
//! per-task and per-example generators run on any worker in any order and
//! still produce bit-identical values.
//!
//! Sub-seeds for disjoint purposes (training examples, held-out tasks,
//! weight init) are produced by [`sub_seed`], a SplitMix64 finalizer over
//! the parent seed and a purpose tag.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tags passed to [`sub_seed`]. Fixed forever: changing one changes every
/// downstream stream.
pub mod tags {
    pub const TRAIN_EXAMPLES: u64 = 0x7472_6169_6e00_0001;
    pub const HELD_OUT: u64 = 0x6865_6c64_0000_0002;
    pub const EVAL_TASKS: u64 = 0x6576_616c_0000_0003;
    pub const MODEL_INIT: u64 = 0x696e_6974_0000_0004;
    pub const DROPOUT: u64 = 0x6472_6f70_0000_0005;
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed for a named purpose.
pub fn sub_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed.wrapping_add(GOLDEN_GAMMA) ^ splitmix64(tag))
}

#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::derive(seed, 0)
    }

    /// Independent stream `index` under `seed`.
    pub fn derive(seed: u64, index: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(index);
        Self { inner }
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform on the open interval `(0, 1)`.
    pub fn uniform_open(&mut self) -> f64 {
        let k = self.inner.next_u64() >> 11;
        (k as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub(crate) fn inner_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.inner
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::derive(42, 7);
        let mut b = Rng::derive(42, 7);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn streams_differ() {
        let mut a = Rng::derive(42, 0);
        let mut b = Rng::derive(42, 1);
        let xs: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn sub_seeds_are_distinct_per_tag() {
        let s = 1;
        let all = [
            sub_seed(s, tags::TRAIN_EXAMPLES),
            sub_seed(s, tags::HELD_OUT),
            sub_seed(s, tags::EVAL_TASKS),
            sub_seed(s, tags::MODEL_INIT),
        ];
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j]);
            }
        }
    }

    #[test]
    fn open_uniform_excludes_endpoints() {
        let mut r = Rng::new(3);
        for _ in 0..100_000 {
            let u = r.uniform_open();
            assert!(u > 0.0 && u < 1.0);
        }
    }
}
