//! The three non-distilled reference models: one network per dataset, one
//! shared trunk with per-dataset heads, and one network over the union of
//! all label spaces.

use std::path::Path;

use mlfd_numerics::{Mode, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{Batch, LabeledDataset, Split, Splits};
use crate::error::{Error, IoContext, Result};
use crate::models::{load_store, read_spec_hash, save_checkpoint, store_digest, Ctx, LayerDesc, ParamStore, Sequential, EVAL_CHUNK};
use crate::train::{hard_ce, Objective};
use crate::util::{sha256_hex, Hasher};

/// Shared trunk layers plus one dense head per dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiHeadSpec {
    pub name: String,
    pub input: Vec<usize>,
    pub trunk: Vec<LayerDesc>,
    /// `(dataset, classes)` per head.
    pub heads: Vec<(String, usize)>,
}

impl MultiHeadSpec {
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("multi-head spec serializes"))
    }
}

#[derive(Debug)]
pub struct MultiHeadNet {
    pub spec: MultiHeadSpec,
    trunk: Sequential,
    heads: Vec<Sequential>,
    pub store: ParamStore,
}

impl MultiHeadNet {
    pub fn build(spec: &MultiHeadSpec, seed: u64) -> Result<MultiHeadNet> {
        if spec.heads.is_empty() {
            return Err(Error::Spec(format!("{}: no heads", spec.name)));
        }
        let mut store = ParamStore::new();
        let trunk = Sequential::new(&spec.trunk, &spec.input, &mut store, "trunk.", seed)?;
        let heads = spec
            .heads
            .iter()
            .map(|(name, c)| Sequential::new(&[LayerDesc::dense(*c)], trunk.output_shape(), &mut store, &format!("head_{name}."), seed))
            .collect::<Result<_>>()?;
        Ok(MultiHeadNet { spec: spec.clone(), trunk, heads, store })
    }

    fn forward(&self, cx: &mut Ctx, x: mlfd_numerics::Var, task: usize) -> Result<mlfd_numerics::Var> {
        let head = self.heads.get(task).ok_or(Error::HeadRouting(task))?;
        let h = self.trunk.forward(cx, &self.store, 0, x)?;
        head.forward(cx, &self.store, 0, h)
    }

    /// Eval-mode logits of head `task` over every row of `inputs`.
    pub fn predict(&self, inputs: &Tensor, task: usize) -> Result<Tensor> {
        let n = inputs.shape()[0];
        let mut parts = Vec::new();
        for start in (0..n).step_by(EVAL_CHUNK) {
            let mut tape = Tape::new();
            let mut cx = Ctx::new(&mut tape, Mode::Eval, 0, 0);
            let x = cx.tape.constant(inputs.slice_rows(start, (start + EVAL_CHUNK).min(n))?);
            let y = self.forward(&mut cx, x, task)?;
            parts.push(tape.value(y).clone());
        }
        Ok(Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())?)
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Hasher::new();
        h.update(self.spec.hash().as_bytes());
        store_digest(&self.store, &mut h);
        h.finish()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &serde_json::to_string_pretty(&self.spec).expect("multi-head spec serializes"), &self.spec.hash(), &self.store)
    }

    pub fn load(dir: &Path) -> Result<MultiHeadNet> {
        let sp = dir.join("spec.json");
        let text = std::fs::read_to_string(&sp).at(&sp)?;
        let spec: MultiHeadSpec = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", sp.display())))?;
        if spec.hash() != read_spec_hash(dir)? {
            return Err(Error::Corruption(format!("{}: spec does not match its recorded hash", sp.display())));
        }
        let mut net = MultiHeadNet::build(&spec, 0)?;
        load_store(dir, &mut net.store)?;
        Ok(net)
    }
}

/// Trains the multi-head net with one batch per dataset per round.
pub struct MultiHeadObjective<'a> {
    pub net: &'a mut MultiHeadNet,
    pub datasets: &'a [&'a LabeledDataset],
}

impl Objective for MultiHeadObjective<'_> {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![&self.net.store]
    }
    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.net.store]
    }
    fn loss(&self, cx: &mut Ctx, task: usize, batch: &Batch) -> Result<(mlfd_numerics::Var, Vec<(String, f64)>)> {
        let x = cx.tape.constant(batch.inputs.clone());
        let logits = self.net.forward(cx, x, task)?;
        let l = hard_ce(cx.tape, logits, &batch.one_hot)?;
        let v = cx.tape.value(l).item();
        Ok((l, vec![("total".into(), v), ("ce".into(), v)]))
    }
    fn scores(&self, task: usize, split: Split) -> Result<(Tensor, usize)> {
        Ok((self.net.predict(&self.datasets[task].split_inputs(split)?, task)?, 0))
    }
}

/// All datasets as one: inputs stacked, labels shifted into a shared label
/// space, splits kept. Returns the merged dataset and each dataset's label offset.
pub fn merge_union(name: &str, datasets: &[&LabeledDataset]) -> Result<(LabeledDataset, Vec<usize>)> {
    let first = datasets.first().ok_or_else(|| Error::Precondition("nothing to merge".into()))?;
    if let Some(d) = datasets.iter().find(|d| d.sample_shape() != first.sample_shape()) {
        return Err(Error::Precondition(format!("{} has input shape {:?}, {} has {:?}", d.name, d.sample_shape(), first.name, first.sample_shape())));
    }
    let (mut labels, mut offsets, mut splits) = (Vec::new(), Vec::new(), Splits::default());
    let (mut classes, mut base) = (0, 0);
    for d in datasets {
        offsets.push(classes);
        labels.extend(d.labels.iter().map(|y| y + classes));
        for s in Split::ALL {
            let dst = match s {
                Split::Train => &mut splits.train,
                Split::Val => &mut splits.val,
                Split::Test => &mut splits.test,
            };
            dst.extend(d.splits.get(s).iter().map(|i| i + base));
        }
        classes += d.classes;
        base += d.len();
    }
    let inputs = Tensor::concat_rows(&datasets.iter().map(|d| &d.inputs).collect::<Vec<_>>())?;
    Ok((LabeledDataset::new(name, inputs, labels, classes, splits)?, offsets))
}
