use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::DataError;

/// Seeded mini-batch sampler: one fresh permutation per epoch, consecutive
/// disjoint batches of exactly `batch_size`, short tail dropped.
///
/// Iterates forever over epochs; use `take` to bound it.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    len: usize,
    batch_size: usize,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
}

impl BatchSampler {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self, DataError> {
        if batch_size == 0 || batch_size > len {
            return Err(DataError::InvalidBatchSize { batch_size, len });
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            len,
            batch_size,
            order: Vec::new(),
            cursor: usize::MAX,
            epoch: 0,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len / self.batch_size
    }

    /// Number of epochs started so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.cursor.saturating_add(self.batch_size) > self.order.len() {
            self.order = (0..self.len).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
            self.epoch += 1;
        }
        let start = self.cursor;
        self.cursor += self.batch_size;
        &self.order[start..self.cursor]
    }

    /// All batches of the next epoch.
    pub fn next_epoch(&mut self) -> Vec<Vec<usize>> {
        (0..self.batches_per_epoch())
            .map(|_| self.next_batch().to_vec())
            .collect()
    }
}

impl Iterator for BatchSampler {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch().to_vec())
    }
}
