//! Seeded, restartable minibatch stream. Epoch `e` uses the permutation drawn
//! from stream `e` of a ChaCha generator keyed by the seed, so a position is
//! just `(epoch, cursor)`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPosition {
    pub epoch: u64,
    pub cursor: usize,
}

#[derive(Clone, Debug)]
pub struct BatchIter {
    n: usize,
    batch: usize,
    seed: u64,
    pos: BatchPosition,
    perm: Vec<usize>,
}

fn permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng);
    p
}

impl BatchIter {
    pub fn new(n: usize, batch: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        if batch == 0 || batch > n {
            return Err(Error::Config(format!(
                "batch size {batch} must lie in [1, {n}]"
            )));
        }
        Ok(Self {
            n,
            batch,
            seed,
            pos: BatchPosition {
                epoch: 0,
                cursor: 0,
            },
            perm: permutation(n, seed, 0),
        })
    }

    /// Dataset size.
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n / self.batch
    }

    pub fn position(&self) -> BatchPosition {
        self.pos
    }

    pub fn seek(&mut self, pos: BatchPosition) -> Result<()> {
        if pos.cursor > self.n {
            return Err(Error::Config(format!(
                "batch cursor {} beyond dataset of {}",
                pos.cursor, self.n
            )));
        }
        if pos.epoch != self.pos.epoch {
            self.perm = permutation(self.n, self.seed, pos.epoch);
        }
        self.pos = pos;
        Ok(())
    }

    /// Indices of the next full batch; the short tail of an epoch is skipped
    /// and the next epoch is reshuffled.
    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.pos.cursor + self.batch > self.n {
            self.pos.epoch += 1;
            self.pos.cursor = 0;
            self.perm = permutation(self.n, self.seed, self.pos.epoch);
        }
        let out = self.perm[self.pos.cursor..self.pos.cursor + self.batch].to_vec();
        self.pos.cursor += self.batch;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_by_three() {
        let mut it = BatchIter::new(10, 3, 1).unwrap();
        assert_eq!(it.batches_per_epoch(), 3);
        let mut seen: Vec<usize> = (0..3).flat_map(|_| it.next_indices()).collect();
        assert_eq!(it.position().epoch, 0);
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        it.next_indices();
        assert_eq!(
            it.position(),
            BatchPosition {
                epoch: 1,
                cursor: 3
            }
        );
    }

    #[test]
    fn seeded_and_seekable() {
        let mut a = BatchIter::new(17, 4, 9).unwrap();
        let mut b = BatchIter::new(17, 4, 9).unwrap();
        let sa: Vec<_> = (0..12).map(|_| a.next_indices()).collect();
        let sb: Vec<_> = (0..12).map(|_| b.next_indices()).collect();
        assert_eq!(sa, sb);
        let mut c = BatchIter::new(17, 4, 9).unwrap();
        for _ in 0..5 {
            c.next_indices();
        }
        let mid = c.position();
        let rest: Vec<_> = (0..7).map(|_| c.next_indices()).collect();
        let mut d = BatchIter::new(17, 4, 9).unwrap();
        d.seek(mid).unwrap();
        assert_eq!((0..7).map(|_| d.next_indices()).collect::<Vec<_>>(), rest);
        assert_ne!(sa, {
            let mut e = BatchIter::new(17, 4, 10).unwrap();
            (0..12).map(|_| e.next_indices()).collect::<Vec<_>>()
        });
    }

    #[test]
    fn rejects_empty_and_oversized() {
        assert!(matches!(BatchIter::new(0, 1, 0), Err(Error::EmptyBatch)));
        assert!(BatchIter::new(3, 4, 0).is_err());
    }
}
