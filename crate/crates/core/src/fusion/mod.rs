//! Joint teacher: frozen per-dataset teachers fused at a shared level and
//! trained on every dataset at once.

mod cache;
mod joint;

pub use cache::{cache_key, CacheEntry, EmbeddingCache, Owner, SHARD_ROWS};
pub use joint::{fuse_embeddings, plan_joint, FusionConfig, JointSpec, JointTeacher, TeacherRef};

use mlfd_numerics::{Tensor, Var};

use crate::data::{Batch, LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::models::{Ctx, Model, ParamStore};
use crate::train::{hard_ce, Engine, Objective, TrainConfig, TrainLog};

/// Cache owner for a trained individual teacher.
pub fn teacher_owner(model: &Model) -> Owner {
    Owner { spec_hash: model.spec_hash(), fingerprint: model.fingerprint() }
}

/// Writes `level` embeddings of every split of every dataset, produced by
/// `teacher` in eval mode. Slots that already exist are skipped. Returns
/// the number of rows written.
pub fn precompute_teacher_embeddings(entry: &CacheEntry, teacher: &Model, datasets: &[&LabeledDataset], level: &str) -> Result<usize> {
    teacher.level_shape(level)?;
    let levels = [level.to_string()];
    let mut written = 0;
    for d in datasets {
        if d.sample_shape() != teacher.spec.input.as_slice() {
            return Err(Error::Precondition(format!(
                "{}: samples are {:?}, teacher expects {:?}",
                d.name,
                d.sample_shape(),
                teacher.spec.input
            )));
        }
        for split in Split::ALL {
            let idx = d.splits.get(split);
            if idx.is_empty() || entry.has(&d.name, split, level) {
                continue;
            }
            let (_, mut taps) = teacher.infer(&d.split_inputs(split)?, &levels)?;
            let emb = taps.remove(level).expect("requested level");
            entry.write(&d.name, split, level, idx, &emb)?;
            written += idx.len();
        }
    }
    Ok(written)
}

/// Embeddings of every sample of `dataset` from each teacher's cache entry,
/// in teacher order.
pub fn load_teacher_embeddings(entries: &[CacheEntry], dataset: &LabeledDataset, level: &str) -> Result<Vec<Tensor>> {
    entries.iter().map(|e| e.read_all(&dataset.name, level, dataset.len())).collect()
}

/// Cross-entropy on every dataset through its own head, fed from cached
/// teacher embeddings.
pub struct JointObjective<'a> {
    pub joint: &'a mut JointTeacher,
    pub datasets: &'a [&'a LabeledDataset],
    /// `embeddings[d][i]`: teacher `i`'s embeddings of every sample of dataset `d`.
    pub embeddings: &'a [Vec<Tensor>],
}

impl JointObjective<'_> {
    fn gather(&self, cx: &mut Ctx, task: usize, rows: &[usize]) -> Result<Vec<Option<Var>>> {
        let embs = self.embeddings.get(task).ok_or(Error::HeadRouting(task))?;
        embs.iter().map(|e| Ok(Some(cx.tape.constant(e.select_rows(rows)?)))).collect()
    }
}

impl Objective for JointObjective<'_> {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![&self.joint.store]
    }
    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.joint.store]
    }
    fn loss(&self, cx: &mut Ctx, task: usize, batch: &Batch) -> Result<(Var, Vec<(String, f64)>)> {
        let embs = self.gather(cx, task, &batch.indices)?;
        let out = self.joint.forward_cached(cx, 0, &embs, task, &[])?;
        let l = hard_ce(cx.tape, out.logits, &batch.one_hot)?;
        let v = cx.tape.value(l).item();
        Ok((l, vec![("total".into(), v), ("ce".into(), v)]))
    }
    fn scores(&self, task: usize, split: Split) -> Result<(Tensor, usize)> {
        let d = self.datasets.get(task).ok_or(Error::HeadRouting(task))?;
        let idx = d.splits.get(split);
        let embs: Vec<Tensor> = self.embeddings[task].iter().map(|e| e.select_rows(idx)).collect::<std::result::Result<_, _>>()?;
        Ok((self.joint.infer_cached(&embs, task, &[])?.0, 0))
    }
}

/// Trains the joint teacher's adaptors, trunk and heads on all datasets.
pub fn train_joint_teacher(
    joint: &mut JointTeacher,
    datasets: &[&LabeledDataset],
    embeddings: &[Vec<Tensor>],
    cfg: &TrainConfig,
    seed: u64,
    track_test: bool,
) -> Result<TrainLog> {
    if embeddings.len() != datasets.len() || embeddings.iter().any(|e| e.len() != joint.m()) {
        return Err(Error::Precondition("teacher embedding cache is empty or incomplete; build it first".into()));
    }
    for (d, embs) in datasets.iter().zip(embeddings) {
        if let Some(e) = embs.iter().find(|e| e.shape()[0] != d.len()) {
            return Err(Error::Precondition(format!("{}: cached embeddings cover {} of {} samples", d.name, e.shape()[0], d.len())));
        }
    }
    let mut obj = JointObjective { joint, datasets, embeddings };
    Engine { tasks: datasets.to_vec(), cfg, seed, track_test }.fit(&mut obj)
}
