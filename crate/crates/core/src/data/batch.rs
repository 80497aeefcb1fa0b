use mlfd_numerics::{rng, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub shuffle_seed: u64,
    /// Micro-batches whose gradients are summed before one optimizer step.
    pub accumulation: usize,
}

impl BatchPlan {
    pub fn new(batch_size: usize, shuffle_seed: u64, accumulation: usize) -> Result<Self> {
        if batch_size == 0 || accumulation == 0 {
            return Err(Error::Config("batch_size and accumulation must be >= 1".into()));
        }
        Ok(BatchPlan { batch_size, shuffle_seed, accumulation })
    }

    /// Deterministic permutation of `indices` for one epoch.
    pub fn epoch_order(&self, indices: &[usize], epoch: u64) -> Vec<usize> {
        let mut order = indices.to_vec();
        let mut r = rng::rng(rng::derive(self.shuffle_seed, &[epoch]));
        order.shuffle(&mut r);
        order
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    /// Dataset sample indices, in batch order.
    pub indices: Vec<usize>,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub one_hot: Tensor,
}

pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (r, &y) in labels.iter().enumerate() {
        data[r * classes + y] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data).expect("non-empty label batch")
}

/// Shuffled mini-batches over the training split; the last batch may be short.
pub fn iterate_batches<'a>(d: &'a LabeledDataset, plan: &BatchPlan, epoch: u64) -> impl Iterator<Item = Batch> + 'a {
    let order = plan.epoch_order(d.splits.get(Split::Train), epoch);
    let bs = plan.batch_size;
    let n_batches = order.len().div_ceil(bs);
    (0..n_batches).map(move |b| {
        let indices = order[b * bs..((b + 1) * bs).min(order.len())].to_vec();
        batch_from_indices(d, indices)
    })
}

pub fn batch_from_indices(d: &LabeledDataset, indices: Vec<usize>) -> Batch {
    let inputs = d.inputs.select_rows(&indices).expect("indices come from the dataset splits");
    let labels: Vec<usize> = indices.iter().map(|&i| d.labels[i]).collect();
    let one_hot = one_hot(&labels, d.classes);
    Batch { indices, inputs, labels, one_hot }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Splits;

    fn toy(n: usize) -> LabeledDataset {
        let inputs = Tensor::new(vec![n, 2], (0..2 * n).map(|v| v as f64).collect()).unwrap();
        let labels = (0..n).map(|i| i % 3).collect();
        let splits = Splits { train: (0..n).collect(), val: vec![], test: vec![] };
        LabeledDataset::new("toy", inputs, labels, 3, splits).unwrap()
    }

    #[test]
    fn batch_sizes_include_the_short_tail() {
        let d = toy(10);
        let plan = BatchPlan::new(4, 1, 1).unwrap();
        let sizes: Vec<usize> = iterate_batches(&d, &plan, 0).map(|b| b.indices.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn same_seed_and_epoch_give_the_same_order() {
        let d = toy(10);
        let plan = BatchPlan::new(3, 9, 1).unwrap();
        let a: Vec<Vec<usize>> = iterate_batches(&d, &plan, 2).map(|b| b.indices).collect();
        let b: Vec<Vec<usize>> = iterate_batches(&d, &plan, 2).map(|b| b.indices).collect();
        let c: Vec<Vec<usize>> = iterate_batches(&d, &plan, 3).map(|b| b.indices).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn epoch_covers_every_training_index_once() {
        let d = toy(23);
        let plan = BatchPlan::new(5, 4, 1).unwrap();
        let mut all: Vec<usize> = iterate_batches(&d, &plan, 7).flat_map(|b| b.indices).collect();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
    }

    #[test]
    fn one_hot_rows() {
        let d = toy(4);
        let plan = BatchPlan::new(4, 0, 1).unwrap();
        let b = iterate_batches(&d, &plan, 0).next().unwrap();
        assert_eq!(b.one_hot.shape(), &[4, 3]);
        for (row, &y) in b.one_hot.data().chunks(3).zip(&b.labels) {
            assert_eq!(row.iter().sum::<f64>(), 1.0);
            assert_eq!(row[y], 1.0);
        }
        assert!(BatchPlan::new(0, 0, 1).is_err());
    }
}
