use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::augment::{strong_augment, weak_augment};
use super::{Dataset, Normalizer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Endless shuffled pass over `0..len`, reshuffled at every cycle.
#[derive(Debug, Clone)]
pub struct BatchStream {
    pub batch_size: usize,
    order: Vec<usize>,
    cursor: usize,
    shuffle_rng: ChaCha8Rng,
    aug_rng: ChaCha8Rng,
}

#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

/// Weak and strong views of the same samples, row for row.
#[derive(Debug, Clone)]
pub struct UnlabeledBatch {
    pub weak: Tensor,
    pub strong: Tensor,
    pub indices: Vec<usize>,
}

impl BatchStream {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if len == 0 || batch_size == 0 {
            return Err(Error::Contract(format!(
                "a stream needs samples and a positive batch size (len {len}, batch {batch_size})"
            )));
        }
        let mut s = Self {
            batch_size,
            order: (0..len).collect(),
            cursor: 0,
            shuffle_rng: ChaCha8Rng::seed_from_u64(seed),
            aug_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a097),
        };
        s.order.shuffle(&mut s.shuffle_rng);
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// The next `batch_size` indices, wrapping into a fresh permutation
    /// whenever the current one is exhausted.
    pub fn next_indices(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.shuffle_rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    fn check(&self, d: &Dataset) -> Result<()> {
        if d.len() != self.order.len() {
            return Err(Error::Contract(format!(
                "stream built for {} samples, dataset has {}",
                self.order.len(),
                d.len()
            )));
        }
        Ok(())
    }

    /// Weak views and labels; fails on an unlabeled sample.
    pub fn next_labeled(&mut self, d: &Dataset, res: usize, norm: &Normalizer) -> Result<LabeledBatch> {
        self.check(d)?;
        let idx = self.next_indices();
        let dims = (d.height, d.width, d.channels);
        let mut data = Vec::with_capacity(idx.len() * d.channels * res * res);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in &idx {
            labels.push(
                d.label(i)
                    .ok_or_else(|| Error::Contract(format!("sample {i} of a labeled stream has no label")))?,
            );
            data.extend(weak_augment(d.image(i), dims, &mut self.aug_rng, res, norm)?.into_data());
        }
        Ok(LabeledBatch {
            images: Tensor::new(vec![idx.len(), d.channels, res, res], data)?,
            labels,
        })
    }

    pub fn next_unlabeled(&mut self, d: &Dataset, res: usize, norm: &Normalizer) -> Result<UnlabeledBatch> {
        self.check(d)?;
        let indices = self.next_indices();
        let dims = (d.height, d.width, d.channels);
        let shape = vec![indices.len(), d.channels, res, res];
        let mut weak = Vec::with_capacity(shape.iter().product());
        let mut strong = Vec::with_capacity(weak.capacity());
        for &i in &indices {
            weak.extend(weak_augment(d.image(i), dims, &mut self.aug_rng, res, norm)?.into_data());
            strong.extend(strong_augment(d.image(i), dims, &mut self.aug_rng, res, norm)?.into_data());
        }
        Ok(UnlabeledBatch {
            weak: Tensor::new(shape.clone(), weak)?,
            strong: Tensor::new(shape, strong)?,
            indices,
        })
    }
}
