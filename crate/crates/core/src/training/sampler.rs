//! Mini-batch samplers over the training split.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{NdfError, Result};

/// One mini-batch: item indices, their labels, and whether drawing it
/// completed a pass over the data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub epoch_end: bool,
}

/// Emits batches holding exactly `per_class_n` items of every class. Each class
/// is drawn without replacement from its own shuffled order; when any class
/// cannot fill another batch, the epoch ends and every order is reshuffled.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    by_class: Vec<Vec<usize>>,
    per_class_n: usize,
    cursor: usize,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl BalancedSampler {
    /// `by_class[c]` lists the item indices of class `c`.
    pub fn new(by_class: Vec<Vec<usize>>, per_class_n: usize, seed: u64) -> Result<Self> {
        if per_class_n < 2 {
            return Err(NdfError::Arity(format!(
                "balanced batches need at least 2 items per class, got {per_class_n}"
            )));
        }
        if by_class.is_empty() {
            return Err(NdfError::Corpus("no classes to sample".into()));
        }
        if let Some((c, v)) = by_class.iter().enumerate().find(|(_, v)| v.len() < per_class_n) {
            return Err(NdfError::Corpus(format!(
                "class {c} has {} items, fewer than {per_class_n} per batch",
                v.len()
            )));
        }
        let mut s = BalancedSampler {
            by_class,
            per_class_n,
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            epoch: 0,
        };
        s.shuffle();
        Ok(s)
    }

    fn shuffle(&mut self) {
        for v in &mut self.by_class {
            v.shuffle(&mut self.rng);
        }
        self.cursor = 0;
    }

    pub fn batch_size(&self) -> usize {
        self.per_class_n * self.by_class.len()
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Batch {
        let n = self.per_class_n;
        let mut indices = Vec::with_capacity(self.batch_size());
        let mut labels = Vec::with_capacity(self.batch_size());
        for (c, v) in self.by_class.iter().enumerate() {
            indices.extend_from_slice(&v[self.cursor..self.cursor + n]);
            labels.extend(std::iter::repeat_n(c, n));
        }
        self.cursor += n;
        let epoch_end = self.by_class.iter().any(|v| v.len() < self.cursor + n);
        if epoch_end {
            self.epoch += 1;
            self.shuffle();
        }
        Batch {
            indices,
            labels,
            epoch_end,
        }
    }
}

/// Plain shuffled batches of a fixed size, for training without class balance.
#[derive(Debug, Clone)]
pub struct ShuffledSampler {
    items: Vec<usize>,
    labels: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl ShuffledSampler {
    /// `items[i]` has label `labels[i]`. A batch larger than the data is
    /// clamped to the data size.
    pub fn new(items: Vec<usize>, labels: Vec<usize>, batch_size: usize, seed: u64) -> Result<Self> {
        if items.is_empty() || batch_size == 0 || items.len() != labels.len() {
            return Err(NdfError::Corpus("empty data or zero batch size".into()));
        }
        let batch_size = batch_size.min(items.len());
        let mut s = ShuffledSampler {
            items,
            labels,
            batch_size,
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.shuffle();
        Ok(s)
    }

    fn shuffle(&mut self) {
        let mut order: Vec<usize> = (0..self.items.len()).collect();
        order.shuffle(&mut self.rng);
        self.items = order.iter().map(|&i| self.items[i]).collect();
        self.labels = order.iter().map(|&i| self.labels[i]).collect();
        self.cursor = 0;
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn next_batch(&mut self) -> Batch {
        let range = self.cursor..self.cursor + self.batch_size;
        let batch = Batch {
            indices: self.items[range.clone()].to_vec(),
            labels: self.labels[range].to_vec(),
            epoch_end: false,
        };
        self.cursor += self.batch_size;
        if self.cursor + self.batch_size > self.items.len() {
            self.shuffle();
            return Batch {
                epoch_end: true,
                ..batch
            };
        }
        batch
    }
}
