//! Labeled datasets, the synthetic related-dataset family, the on-disk
//! dataset format and batch iteration.

mod batch;
mod store;
mod synth;

pub use batch::{batch_from_indices, iterate_batches, one_hot, Batch, BatchPlan};
pub use store::{load_dataset, save_dataset};
pub use synth::{gen_synthetic_family, style_shift, Render, SyntheticFamilySpec};

use std::fmt;

use mlfd_numerics::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        Split::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split '{s}' (train, val, test)")))
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, s: Split) -> &[usize] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// One classification dataset: inputs `[n, ...]`, integer labels and a
/// train/val/test partition of the sample indices.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub splits: Splits,
}

impl LabeledDataset {
    pub fn new(name: impl Into<String>, inputs: Tensor, labels: Vec<usize>, classes: usize, splits: Splits) -> Result<Self> {
        let d = LabeledDataset { name: name.into(), inputs, labels, classes, splits };
        d.validate()?;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample input shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if n == 0 {
            return Err(Error::Format(format!("{}: dataset has no samples", self.name)));
        }
        if self.classes == 0 {
            return Err(Error::Format(format!("{}: class count must be >= 1", self.name)));
        }
        if self.inputs.shape()[0] != n {
            return Err(Error::Format(format!(
                "{}: {} input rows but {n} labels",
                self.name,
                self.inputs.shape()[0]
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.classes) {
            return Err(Error::Format(format!("{}: label {bad} >= class count {}", self.name, self.classes)));
        }
        let mut seen = vec![false; n];
        for s in Split::ALL {
            for &i in self.splits.get(s) {
                if i >= n || seen[i] {
                    return Err(Error::Format(format!(
                        "{}: split index {i} out of range or assigned twice",
                        self.name
                    )));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Format(format!("{}: splits do not cover every sample", self.name)));
        }
        Ok(())
    }

    pub fn split_inputs(&self, s: Split) -> Result<Tensor> {
        Ok(self.inputs.select_rows(self.splits.get(s))?)
    }

    pub fn split_labels(&self, s: Split) -> Vec<usize> {
        self.splits.get(s).iter().map(|&i| self.labels[i]).collect()
    }

    /// Hash of name, inputs (bitwise), labels and splits.
    pub fn content_hash(&self) -> String {
        let mut h = crate::util::Hasher::new();
        h.update(self.name.as_bytes()).update(&self.classes.to_le_bytes());
        let shape: Vec<u8> = self.inputs.shape().iter().flat_map(|d| (*d as u64).to_le_bytes()).collect();
        h.update(&shape);
        let bytes: Vec<u8> = self.inputs.data().iter().flat_map(|v| v.to_bits().to_le_bytes()).collect();
        h.update(&bytes);
        let labels: Vec<u8> = self.labels.iter().flat_map(|y| (*y as u64).to_le_bytes()).collect();
        h.update(&labels);
        for s in Split::ALL {
            let idx: Vec<u8> = self.splits.get(s).iter().flat_map(|i| (*i as u64).to_le_bytes()).collect();
            h.update(&idx);
        }
        h.finish()
    }
}
