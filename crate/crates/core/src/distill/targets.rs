use std::collections::BTreeMap;

use mlfd_numerics::{softmax_with_temperature, Tensor};

use crate::data::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::fusion::{cache_key, CacheEntry, EmbeddingCache, JointTeacher, Owner};

/// Level name under which class probabilities are cached.
pub const PROBS: &str = "probs";

/// Joint-teacher outputs for the training samples of one dataset.
#[derive(Clone, Debug)]
pub struct DistillTargets {
    pub dataset: String,
    /// Distilled levels in depth order.
    pub levels: Vec<String>,
    /// Dataset sample index of each row.
    pub samples: Vec<usize>,
    /// Row-stochastic class probabilities at temperature 1.
    pub probs: Tensor,
    pub embeddings: BTreeMap<String, Tensor>,
    row_of: Vec<Option<usize>>,
}

impl DistillTargets {
    pub fn new(dataset: &str, levels: Vec<String>, samples: Vec<usize>, probs: Tensor, embeddings: BTreeMap<String, Tensor>) -> Result<Self> {
        let n = samples.len();
        if probs.shape()[0] != n || embeddings.values().any(|e| e.shape()[0] != n) {
            return Err(Error::Precondition(format!("{dataset}: target rows do not match {n} samples")));
        }
        if let Some(l) = levels.iter().find(|l| !embeddings.contains_key(*l)) {
            return Err(Error::Precondition(format!("{dataset}: no targets for level {l}")));
        }
        mlfd_numerics::tape::check_stochastic(&probs, "teacher probabilities")?;
        let mut row_of = vec![None; samples.iter().max().map_or(0, |m| m + 1)];
        for (r, &s) in samples.iter().enumerate() {
            row_of[s] = Some(r);
        }
        Ok(DistillTargets { dataset: dataset.to_string(), levels, samples, probs, embeddings, row_of })
    }

    pub fn covers(&self, sample: usize) -> bool {
        self.row_of.get(sample).is_some_and(|r| r.is_some())
    }

    /// Probabilities and per-level embeddings for dataset samples `idx`.
    pub fn rows(&self, idx: &[usize]) -> Result<(Tensor, Vec<Tensor>)> {
        let rows: Vec<usize> = idx
            .iter()
            .map(|&i| self.row_of.get(i).copied().flatten().ok_or_else(|| Error::Precondition(format!("{}: no target for sample {i}", self.dataset))))
            .collect::<Result<_>>()?;
        let probs = self.probs.select_rows(&rows)?;
        let embs = self.levels.iter().map(|l| self.embeddings[l].select_rows(&rows)).collect::<std::result::Result<_, _>>()?;
        Ok((probs, embs))
    }

    /// Persists every tensor under `entry`: one slot for the probabilities and one per level.
    pub fn save(&self, entry: &CacheEntry) -> Result<()> {
        entry.write(&self.dataset, Split::Train, PROBS, &self.samples, &self.probs)?;
        for l in &self.levels {
            entry.write(&self.dataset, Split::Train, l, &self.samples, &self.embeddings[l])?;
        }
        Ok(())
    }

    pub fn load(entry: &CacheEntry, dataset: &str, levels: &[String]) -> Result<Self> {
        let (samples, probs) = entry.read(dataset, Split::Train, PROBS)?;
        let mut embeddings = BTreeMap::new();
        for l in levels {
            let (s, e) = entry.read(dataset, Split::Train, l)?;
            if s != samples {
                return Err(Error::Corruption(format!("{dataset}: level {l} targets cover different samples")));
            }
            embeddings.insert(l.clone(), e);
        }
        DistillTargets::new(dataset, levels.to_vec(), samples, probs, embeddings)
    }
}

/// Cache section holding targets produced by `joint` for the job `job`.
pub fn targets_entry(cache: &EmbeddingCache, joint: &JointTeacher, job: &str) -> Result<CacheEntry> {
    let owner = Owner { spec_hash: joint.spec.hash(), fingerprint: joint.fingerprint() };
    cache.entry(&cache_key(&owner.spec_hash, &format!("targets/{job}")), owner)
}

/// Eval-mode pass of the joint teacher over the training split of dataset
/// `task`, from that dataset's cached teacher embeddings.
pub fn extract_distill_targets(joint: &JointTeacher, task: usize, data: &LabeledDataset, embeddings: &[Tensor], levels: &[String]) -> Result<DistillTargets> {
    let idx = data.splits.get(Split::Train);
    let embs: Vec<Tensor> = embeddings.iter().map(|e| e.select_rows(idx)).collect::<std::result::Result<_, _>>()?;
    let (logits, taps) = joint.infer_cached(&embs, task, levels)?;
    let probs = softmax_with_temperature(&logits, 1.0)?;
    DistillTargets::new(&data.name, levels.to_vec(), idx.to_vec(), probs, taps)
}
