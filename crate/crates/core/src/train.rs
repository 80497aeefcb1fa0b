//! Shared training engine: mini-batch loop over one or more datasets with
//! gradient accumulation, early stopping on validation acc@1 and per-epoch
//! metric rows.

use std::time::Instant;

use mlfd_numerics::{build_optimizer, rng, Mode, Optimizer, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::{one_hot, Batch, BatchPlan, LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::models::{Ctx, Model, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvergencePolicy {
    pub max_epochs: usize,
    pub min_epochs: usize,
    /// Epochs without a validation acc@1 improvement before stopping.
    pub patience: usize,
}

impl ConvergencePolicy {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 || self.max_epochs == 0 || self.min_epochs > self.max_epochs {
            return Err(Error::Config(format!(
                "convergence policy needs patience >= 1 and 1 <= min_epochs <= max_epochs (got {self:?})"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_optimizer")]
    pub optimizer: String,
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Micro-batches (or dataset rounds) per optimizer step.
    #[serde(default = "one")]
    pub accumulation: usize,
    pub max_epochs: usize,
    #[serde(default = "default_min_epochs")]
    pub min_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
}

fn default_optimizer() -> String {
    "adamw".into()
}
fn default_batch() -> usize {
    64
}
fn one() -> usize {
    1
}
fn default_min_epochs() -> usize {
    20
}
fn default_patience() -> usize {
    10
}

impl TrainConfig {
    pub fn policy(&self) -> ConvergencePolicy {
        ConvergencePolicy { max_epochs: self.max_epochs, min_epochs: self.min_epochs.min(self.max_epochs), patience: self.patience }
    }

    pub fn validate(&self) -> Result<()> {
        self.policy().validate()?;
        if self.batch_size == 0 || self.accumulation == 0 {
            return Err(Error::Config("batch_size and accumulation must be >= 1".into()));
        }
        build_optimizer(&self.optimizer, self.learning_rate, self.weight_decay)?;
        Ok(())
    }
}

/// acc@1 and acc@k (k = min(5, classes)), in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub acc1: f64,
    pub acc5: f64,
    /// The k actually used for "acc@5".
    pub k5: usize,
}

impl Accuracy {
    pub fn top5_reduced(&self) -> bool {
        self.k5 < 5
    }
}

/// Whether `label` is among the `k` best entries of `row`; ties rank the
/// lower index first.
fn in_top_k(row: &[f64], label: usize, k: usize) -> bool {
    let s = row[label];
    let ahead = row.iter().enumerate().filter(|&(j, &v)| v > s || (v == s && j < label)).count();
    ahead < k
}

/// Top-k accuracy in percent; `labels[r] + offset` indexes row `r`.
pub fn topk_accuracy(scores: &Tensor, labels: &[usize], offset: usize, k: usize) -> f64 {
    let w = scores.row_len();
    let hits = scores.data().chunks(w).zip(labels).filter(|(row, &y)| in_top_k(row, y + offset, k)).count();
    100.0 * hits as f64 / labels.len().max(1) as f64
}

pub fn accuracy(scores: &Tensor, labels: &[usize], offset: usize) -> Accuracy {
    let k5 = scores.row_len().min(5);
    Accuracy { acc1: topk_accuracy(scores, labels, offset, 1), acc5: topk_accuracy(scores, labels, offset, k5), k5 }
}

/// One logged row: losses on train rows, accuracies on val/test rows.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub task: usize,
    pub split: Split,
    /// Named loss components (empty for evaluation rows); `total` first.
    pub losses: Vec<(String, f64)>,
    pub acc: Option<Accuracy>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub rows: Vec<EpochRow>,
    pub epochs_run: usize,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub best_val_acc1: f64,
    pub steps: u64,
    pub seconds: f64,
}

/// What the engine trains: owns the parameter stores and defines the loss.
pub trait Objective {
    /// Trainable stores in tape-key order: store `s` binds keys starting at
    /// the summed parameter counts of stores `0..s`. Train-mode batchnorm
    /// statistics are folded into store 0.
    fn stores(&self) -> Vec<&ParamStore>;
    fn stores_mut(&mut self) -> Vec<&mut ParamStore>;
    /// Loss of one micro-batch of `task` plus named component values (`total` first).
    fn loss(&self, cx: &mut Ctx, task: usize, batch: &Batch) -> Result<(Var, Vec<(String, f64)>)>;
    /// Eval-mode scores over a split of `task`, and the label offset into the score columns.
    fn scores(&self, task: usize, split: Split) -> Result<(Tensor, usize)>;
}

/// Tape key of each store's first parameter.
pub fn key_bases(stores: &[&ParamStore]) -> Vec<usize> {
    let mut acc = 0;
    stores
        .iter()
        .map(|s| {
            let b = acc;
            acc += s.params.len();
            b
        })
        .collect()
}

pub fn evaluate_split(obj: &dyn Objective, task: usize, data: &LabeledDataset, split: Split) -> Result<Accuracy> {
    if data.splits.get(split).is_empty() {
        return Err(Error::Precondition(format!("{}: empty {split} split", data.name)));
    }
    let (scores, offset) = obj.scores(task, split)?;
    Ok(accuracy(&scores, &data.split_labels(split), offset))
}

pub struct Engine<'a> {
    pub tasks: Vec<&'a LabeledDataset>,
    pub cfg: &'a TrainConfig,
    /// Job seed: shuffle and dropout streams derive from it.
    pub seed: u64,
    /// Evaluate the test split after every epoch (for training curves).
    pub track_test: bool,
}

struct Cursor {
    order: Vec<usize>,
    pos: usize,
    cycle: u64,
    plan: BatchPlan,
}

impl Cursor {
    fn next_batch(&mut self, d: &LabeledDataset, bs: usize) -> Batch {
        if self.pos >= self.order.len() {
            self.cycle += 1;
            self.order = self.plan.epoch_order(d.splits.get(Split::Train), self.cycle);
            self.pos = 0;
        }
        let end = (self.pos + bs).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        crate::data::batch_from_indices(d, indices)
    }
}

impl Engine<'_> {
    pub fn fit(&self, obj: &mut dyn Objective) -> Result<TrainLog> {
        self.cfg.validate()?;
        let started = Instant::now();
        let policy = self.cfg.policy();
        let bs = self.cfg.batch_size;
        let shuffle = rng::derive_named(self.seed, "shuffle");
        let dropout = rng::derive_named(self.seed, "dropout");
        for d in &self.tasks {
            if d.splits.train.is_empty() || d.splits.val.is_empty() {
                return Err(Error::Precondition(format!("{}: training needs non-empty train and val splits", d.name)));
            }
        }

        let mut optimizers: Vec<Box<dyn Optimizer>> = obj
            .stores()
            .iter()
            .map(|_| build_optimizer(&self.cfg.optimizer, self.cfg.learning_rate, self.cfg.weight_decay))
            .collect::<std::result::Result<_, _>>()?;
        let mut cursors: Vec<Cursor> = self
            .tasks
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let plan = BatchPlan::new(bs, rng::derive(shuffle, &[i as u64]), self.cfg.accumulation)?;
                Ok(Cursor { order: plan.epoch_order(d.splits.get(Split::Train), 0), pos: 0, cycle: 0, plan })
            })
            .collect::<Result<_>>()?;
        let rounds = self.tasks.iter().map(|d| d.splits.train.len().div_ceil(bs)).max().unwrap_or(0);
        let scale = 1.0 / self.cfg.accumulation as f64;

        let mut log = TrainLog::default();
        let mut best: Option<(f64, usize, Vec<ParamStore>)> = None;
        let mut micro: u64 = 0;
        for epoch in 1..=policy.max_epochs {
            let mut sums: Vec<Vec<(String, f64)>> = vec![Vec::new(); self.tasks.len()];
            let mut counts = vec![0usize; self.tasks.len()];
            for round in 0..rounds {
                for (t, d) in self.tasks.iter().enumerate() {
                    let batch = cursors[t].next_batch(d, bs);
                    let mut tape = Tape::new();
                    let mut cx = Ctx::new(&mut tape, Mode::Train, dropout, micro);
                    micro += 1;
                    let (loss, parts) = obj.loss(&mut cx, t, &batch)?;
                    let stats = std::mem::take(&mut cx.stats);
                    let scaled = if self.cfg.accumulation > 1 { tape.scale(loss, scale)? } else { loss };
                    tape.backward(scaled)?;
                    let mut stores = obj.stores_mut();
                    let bases = key_bases(&stores.iter().map(|s| &**s).collect::<Vec<_>>());
                    for (s, base) in stores.iter_mut().zip(bases) {
                        tape.accumulate_range(&mut s.params, base)?;
                    }
                    stores[0].apply_stats(&stats);
                    add_parts(&mut sums[t], &parts);
                    counts[t] += 1;
                }
                if (round + 1) % self.cfg.accumulation == 0 || round + 1 == rounds {
                    for (s, opt) in obj.stores_mut().into_iter().zip(optimizers.iter_mut()) {
                        opt.step(&mut s.params)?;
                    }
                    log.steps += 1;
                }
            }

            let mut val_mean = 0.0;
            for (t, d) in self.tasks.iter().enumerate() {
                let losses = sums[t].iter().map(|(k, v)| (k.clone(), v / counts[t].max(1) as f64)).collect();
                log.rows.push(EpochRow { epoch, task: t, split: Split::Train, losses, acc: None });
                let val = evaluate_split(obj, t, d, Split::Val)?;
                val_mean += val.acc1 / self.tasks.len() as f64;
                log.rows.push(EpochRow { epoch, task: t, split: Split::Val, losses: Vec::new(), acc: Some(val) });
                if self.track_test && !d.splits.test.is_empty() {
                    let test = evaluate_split(obj, t, d, Split::Test)?;
                    log.rows.push(EpochRow { epoch, task: t, split: Split::Test, losses: Vec::new(), acc: Some(test) });
                }
            }
            log.epochs_run = epoch;
            let improved = best.as_ref().map_or(true, |(b, _, _)| val_mean > *b);
            if improved {
                best = Some((val_mean, epoch, obj.stores().into_iter().cloned().collect()));
            }
            let since = epoch - best.as_ref().map_or(epoch, |(_, e, _)| *e);
            if epoch >= policy.min_epochs && since >= policy.patience {
                break;
            }
        }
        if let Some((acc, epoch, stores)) = best {
            for (dst, src) in obj.stores_mut().into_iter().zip(stores) {
                for (p, q) in dst.params.iter_mut().zip(src.params) {
                    p.value = q.value;
                    p.zero_grad();
                }
                dst.buffers = src.buffers;
            }
            log.best_epoch = epoch;
            log.best_val_acc1 = acc;
        }
        log.seconds = started.elapsed().as_secs_f64();
        Ok(log)
    }
}

fn add_parts(acc: &mut Vec<(String, f64)>, parts: &[(String, f64)]) {
    if acc.is_empty() {
        acc.extend(parts.iter().cloned());
        return;
    }
    for ((_, a), (_, v)) in acc.iter_mut().zip(parts) {
        *a += v;
    }
}

/// One-hot rows for labels placed at `offset` inside `width` columns.
pub fn offset_one_hot(labels: &[usize], offset: usize, width: usize) -> Tensor {
    let shifted: Vec<usize> = labels.iter().map(|y| y + offset).collect();
    one_hot(&shifted, width)
}

/// `CE(softmax(logits), one_hot)`, the hard-label term shared by every objective.
pub fn hard_ce(tape: &mut Tape, logits: Var, one_hot: &Tensor) -> Result<Var> {
    let p = tape.softmax(logits, 1.0)?;
    let y = tape.constant(one_hot.clone());
    Ok(tape.cross_entropy(p, y)?)
}

/// Plain cross-entropy training of one model on one dataset.
pub struct Supervised<'a> {
    pub model: &'a mut Model,
    pub data: &'a LabeledDataset,
}

impl Objective for Supervised<'_> {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![&self.model.store]
    }
    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.model.store]
    }
    fn loss(&self, cx: &mut Ctx, _: usize, batch: &Batch) -> Result<(Var, Vec<(String, f64)>)> {
        let x = cx.tape.constant(batch.inputs.clone());
        let out = self.model.forward(cx, 0, x, &[])?;
        let l = hard_ce(cx.tape, out.logits, &batch.one_hot)?;
        let v = cx.tape.value(l).item();
        Ok((l, vec![("total".into(), v), ("ce".into(), v)]))
    }
    fn scores(&self, _: usize, split: Split) -> Result<(Tensor, usize)> {
        Ok((self.model.predict(&self.data.split_inputs(split)?)?, 0))
    }
}
