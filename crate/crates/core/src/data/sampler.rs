use super::{Dataset, DeviceShard};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Emits half-unlabeled, half-labeled training batches for one device.
///
/// Unlabeled rows are drawn without replacement from a reshuffled epoch
/// order; labeled anomalies are drawn with replacement. Unlabeled rows are
/// always labeled 0, including hidden anomalies.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    batch_size: usize,
    unlabeled: Vec<usize>,
    labeled: Vec<usize>,
    cursor: usize,
    rng: Rng,
}

impl BatchSampler {
    pub fn new(shard: &DeviceShard, batch_size: usize, rng: Rng) -> Result<Self> {
        if batch_size == 0 || !batch_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "batch size must be even and positive, got {batch_size}"
            )));
        }
        if shard.unlabeled.is_empty() || shard.labeled.is_empty() {
            return Err(Error::Config(format!(
                "device {} has an empty training pool",
                shard.device
            )));
        }
        let mut sampler = BatchSampler {
            batch_size,
            unlabeled: shard.unlabeled.clone(),
            labeled: shard.labeled.clone(),
            cursor: 0,
            rng,
        };
        sampler.rng.shuffle(&mut sampler.unlabeled);
        Ok(sampler)
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Row indices and training labels of the next batch.
    pub fn next_indices(&mut self) -> Vec<(usize, u8)> {
        let half = self.batch_size / 2;
        let mut out = Vec::with_capacity(self.batch_size);
        for _ in 0..half {
            if self.cursor == self.unlabeled.len() {
                self.rng.shuffle(&mut self.unlabeled);
                self.cursor = 0;
            }
            out.push((self.unlabeled[self.cursor], 0));
            self.cursor += 1;
        }
        for _ in 0..half {
            out.push((self.labeled[self.rng.below(self.labeled.len())], 1));
        }
        self.rng.shuffle(&mut out);
        out
    }

    pub fn next_batch(&mut self, ds: &Dataset) -> (Matrix, Vec<u8>) {
        let picks = self.next_indices();
        let rows: Vec<usize> = picks.iter().map(|p| p.0).collect();
        let labels = picks.iter().map(|p| p.1).collect();
        (ds.features.select_rows(&rows), labels)
    }
}
