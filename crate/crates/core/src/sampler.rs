use rand::seq::SliceRandom;

use crate::seed::SeedTree;

/// Epoch-shuffled minibatches; a trailing partial batch is dropped.
#[derive(Clone, Debug)]
pub struct MinibatchSampler {
    n: usize,
    batch: usize,
    seeds: SeedTree,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl MinibatchSampler {
    pub fn new(n: usize, batch: usize, seeds: SeedTree) -> Self {
        let batch = batch.clamp(1, n.max(1));
        let mut s = MinibatchSampler { n, batch, seeds, epoch: 0, order: Vec::new(), pos: 0 };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut self.seeds.index(self.epoch).rng());
        self.pos = 0;
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.n {
            self.epoch += 1;
            self.reshuffle();
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

/// `lr · ½(1 + cos(π·step/total))`.
pub fn cosine_lr(lr: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr;
    }
    lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn each_epoch_is_a_permutation() {
        let mut s = MinibatchSampler::new(10, 5, SeedTree::new(1));
        let mut seen: Vec<usize> = s.next_batch();
        seen.extend(s.next_batch());
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(s.next_batch().len(), 5);
    }

    #[test]
    fn oversized_batch_is_whole_set() {
        let mut s = MinibatchSampler::new(3, 64, SeedTree::new(1));
        assert_eq!(s.next_batch().len(), 3);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!(cosine_lr(0.1, 10, 10).abs() < 1e-12);
    }
}
