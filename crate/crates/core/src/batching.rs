//! Seed-deterministic epoch permutations and batch schedules.

use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::rng::{derive_seed, seeded};

/// Permutation of `0..n` for `epoch`, fixed by `seed`.
pub fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = seeded(derive_seed(seed, "epoch").wrapping_add(epoch));
    idx.shuffle(&mut rng);
    idx
}

/// Splits each epoch's permutation into batches; the last may be short.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub n: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl BatchPlan {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        assert!(batch_size >= 1, "batch_size must be at least 1");
        Self { n, batch_size, seed }
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch_size)
    }

    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        epoch_permutation(self.n, self.seed, epoch)
            .chunks(self.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// The `index`-th batch of the endless epoch stream.
    pub fn batch_at(&self, index: u64) -> Vec<usize> {
        let per = self.batches_per_epoch() as u64;
        if per == 0 {
            return Vec::new();
        }
        let mut e = self.epoch(index / per);
        e.swap_remove((index % per) as usize)
    }
}
