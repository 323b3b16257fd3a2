use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::Sampling;
use crate::error::{Error, Result};

/// Draws mini-batches of example indices from a fixed pool.
///
/// In shuffle mode a batch larger than what is left of the current epoch
/// continues into a freshly shuffled epoch; [`BatchSampler::wrapped`] reports
/// whether that ever happened within a single batch.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    pool: Vec<usize>,
    batch: usize,
    mode: Sampling,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    wrapped: bool,
}

impl BatchSampler {
    pub fn new(pool: Vec<usize>, batch: usize, mode: Sampling, rng: ChaCha8Rng) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::Config("cannot sample from an empty split".into()));
        }
        if batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(BatchSampler {
            pool,
            batch,
            mode,
            rng,
            order: Vec::new(),
            cursor: 0,
            wrapped: false,
        })
    }

    pub fn wrapped(&self) -> bool {
        self.wrapped
    }

    pub fn pool(&self) -> &[usize] {
        &self.pool
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        match self.mode {
            Sampling::Full => self.pool.clone(),
            Sampling::Replacement => (0..self.batch)
                .map(|_| self.pool[self.rng.random_range(0..self.pool.len())])
                .collect(),
            Sampling::Shuffle => {
                let mut out = Vec::with_capacity(self.batch);
                let mut refills = 0;
                while out.len() < self.batch {
                    if self.cursor == self.order.len() {
                        self.order = self.pool.clone();
                        self.order.shuffle(&mut self.rng);
                        self.cursor = 0;
                        refills += 1;
                    }
                    let take = (self.batch - out.len()).min(self.order.len() - self.cursor);
                    out.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
                    self.cursor += take;
                }
                if self.batch > self.pool.len() || refills > 1 {
                    self.wrapped = true;
                }
                out
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn full_mode_returns_pool() {
        let mut s =
            BatchSampler::new(vec![4, 7, 9], 2, Sampling::Full, ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s.next_batch(), vec![4, 7, 9]);
        assert_eq!(s.next_batch(), vec![4, 7, 9]);
    }

    #[test]
    fn epoch_covers_each_index_once() {
        let pool: Vec<usize> = (0..12).collect();
        let mut s = BatchSampler::new(pool, 4, Sampling::Shuffle, ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..12).collect::<Vec<_>>());
        assert!(!s.wrapped());
    }

    #[test]
    fn oversized_batch_wraps() {
        let mut s =
            BatchSampler::new(vec![0, 1, 2], 5, Sampling::Shuffle, ChaCha8Rng::seed_from_u64(2)).unwrap();
        let b = s.next_batch();
        assert_eq!(b.len(), 5);
        assert!(s.wrapped());
    }

    #[test]
    fn empty_pool_is_rejected() {
        assert!(BatchSampler::new(vec![], 1, Sampling::Full, ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
