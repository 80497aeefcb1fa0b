use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use mlfd_numerics::{io as tio, Mode, Tape, Tensor, Var};

use super::layers::Ctx;
use super::sequential::{ParamStore, Sequential};
use super::spec::ModelSpec;
use crate::error::{Error, IoContext, Result};
use crate::util::Hasher;

/// Rows per tape when running a model over a whole tensor outside training.
pub const EVAL_CHUNK: usize = 256;

#[derive(Debug)]
pub struct ModelOut {
    pub logits: Var,
    pub taps: BTreeMap<String, Var>,
}

/// A classifier built from a [`ModelSpec`], owning its parameters.
#[derive(Debug)]
pub struct Model {
    pub spec: ModelSpec,
    net: Sequential,
    pub store: ParamStore,
}

pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    Model::build(spec, seed)
}

impl Model {
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let net = Sequential::new(&spec.full_layers(), &spec.input, &mut store, "", seed)?;
        Ok(Model { spec: spec.clone(), net, store })
    }

    pub fn net(&self) -> &Sequential {
        &self.net
    }

    pub fn classes(&self) -> usize {
        self.spec.head
    }

    /// Boundary right before the head.
    pub fn pre_head(&self) -> usize {
        self.spec.layers.len()
    }

    pub fn level_boundary(&self, id: &str) -> Result<usize> {
        Ok(self.spec.taps.get(id)?.boundary)
    }

    pub fn level_shape(&self, id: &str) -> Result<&[usize]> {
        Ok(self.net.boundary_shape(self.level_boundary(id)?))
    }

    /// Logits plus the activations at `levels`. `key_base` offsets parameter tape keys.
    pub fn forward(&self, cx: &mut Ctx, key_base: usize, x: Var, levels: &[String]) -> Result<ModelOut> {
        let bounds: Vec<usize> = levels.iter().map(|l| self.level_boundary(l)).collect::<Result<_>>()?;
        let (logits, seen) = self.net.run(cx, &self.store, key_base, x, 0, self.net.len(), &bounds)?;
        let taps = levels.iter().zip(&bounds).map(|(l, b)| (l.clone(), seen[b])).collect();
        Ok(ModelOut { logits, taps })
    }

    /// Runs only the layers up to the boundary of `level`.
    pub fn forward_until(&self, cx: &mut Ctx, key_base: usize, x: Var, level: &str) -> Result<Var> {
        let b = self.level_boundary(level)?;
        Ok(self.net.run(cx, &self.store, key_base, x, 0, b, &[])?.0)
    }

    /// Eval-mode logits and level activations over every row of `inputs`.
    pub fn infer(&self, inputs: &Tensor, levels: &[String]) -> Result<(Tensor, BTreeMap<String, Tensor>)> {
        let n = inputs.shape()[0];
        let mut logits = Vec::new();
        let mut taps: BTreeMap<String, Vec<Tensor>> = levels.iter().map(|l| (l.clone(), Vec::new())).collect();
        for start in (0..n).step_by(EVAL_CHUNK) {
            let chunk = inputs.slice_rows(start, (start + EVAL_CHUNK).min(n))?;
            let mut tape = Tape::new();
            let mut cx = Ctx::new(&mut tape, Mode::Eval, 0, 0);
            let x = cx.tape.constant(chunk);
            let out = self.forward(&mut cx, 0, x, levels)?;
            logits.push(tape.value(out.logits).clone());
            for (l, v) in &out.taps {
                taps.get_mut(l).expect("requested level").push(tape.value(*v).clone());
            }
        }
        let cat = |parts: &[Tensor]| Tensor::concat_rows(&parts.iter().collect::<Vec<_>>());
        let taps = taps.into_iter().map(|(l, parts)| Ok((l, cat(&parts)?))).collect::<Result<_>>()?;
        Ok((cat(&logits)?, taps))
    }

    pub fn predict(&self, inputs: &Tensor) -> Result<Tensor> {
        Ok(self.infer(inputs, &[])?.0)
    }

    pub fn count_params(&self, exclude_frozen: bool) -> usize {
        self.store.count(exclude_frozen)
    }

    pub fn freeze(&mut self) {
        self.store.freeze();
    }

    pub fn spec_hash(&self) -> String {
        self.spec.hash()
    }

    /// Hash of the spec together with every parameter and buffer value.
    pub fn fingerprint(&self) -> String {
        let mut h = Hasher::new();
        h.update(self.spec_hash().as_bytes());
        store_digest(&self.store, &mut h);
        h.finish()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &serde_json::to_string_pretty(&self.spec).expect("spec serializes"), &self.spec_hash(), &self.store)
    }

    /// Loads a checkpoint; if `expected` is given its hash must match the stored one.
    pub fn load(dir: &Path, expected: Option<&ModelSpec>) -> Result<Model> {
        let sp = dir.join(SPEC);
        let text = fs::read_to_string(&sp).at(&sp)?;
        let spec: ModelSpec = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", sp.display())))?;
        let stored = read_spec_hash(dir)?;
        if spec.hash() != stored {
            return Err(Error::Corruption(format!("{}: spec does not match its recorded hash", sp.display())));
        }
        if let Some(e) = expected {
            if e.hash() != stored {
                return Err(Error::Precondition(format!(
                    "checkpoint {} was built from a different model spec (hash {} vs expected {})",
                    dir.display(),
                    &stored[..12],
                    &e.hash()[..12]
                )));
            }
        }
        let mut model = Model::build(&spec, 0)?;
        load_store(dir, &mut model.store)?;
        Ok(model)
    }
}

const SPEC: &str = "spec.json";
const SPEC_HASH: &str = "spec_hash";

pub(crate) fn store_digest(store: &ParamStore, h: &mut Hasher) {
    for (name, p) in store.param_names.iter().zip(&store.params) {
        h.update(name.as_bytes());
        h.update(&tio::encode(&p.value).expect("finite parameter"));
    }
    for (name, b) in store.buffer_names.iter().zip(&store.buffers) {
        h.update(name.as_bytes());
        let bytes: Vec<u8> = b.iter().flat_map(|v| v.to_le_bytes()).collect();
        h.update(&bytes);
    }
}

pub(crate) fn read_spec_hash(dir: &Path) -> Result<String> {
    let p = dir.join(SPEC_HASH);
    Ok(fs::read_to_string(&p).at(&p)?.trim().to_string())
}

/// Writes `spec.json`, `spec_hash` and one tensor file per parameter and
/// buffer. The directory appears atomically (written aside, then renamed).
pub(crate) fn save_checkpoint(dir: &Path, spec_json: &str, spec_hash: &str, store: &ParamStore) -> Result<()> {
    let tmp = dir.with_extension("partial");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).at(&tmp)?;
    }
    fs::create_dir_all(tmp.join("params")).at(&tmp)?;
    fs::create_dir_all(tmp.join("buffers")).at(&tmp)?;
    fs::write(tmp.join(SPEC), spec_json).at(tmp.join(SPEC))?;
    fs::write(tmp.join(SPEC_HASH), format!("{spec_hash}\n")).at(tmp.join(SPEC_HASH))?;
    for (name, p) in store.param_names.iter().zip(&store.params) {
        tio::save(&tmp.join("params").join(format!("{name}.tnsr")), &p.value)?;
    }
    for (name, b) in store.buffer_names.iter().zip(&store.buffers) {
        tio::save(&tmp.join("buffers").join(format!("{name}.tnsr")), &Tensor::new(vec![b.len()], b.clone())?)?;
    }
    if dir.exists() {
        fs::remove_dir_all(dir).at(dir)?;
    }
    fs::rename(&tmp, dir).at(dir)
}

/// Fills an already-shaped store from checkpoint tensors.
pub(crate) fn load_store(dir: &Path, store: &mut ParamStore) -> Result<()> {
    for (name, p) in store.param_names.iter().zip(store.params.iter_mut()) {
        let path = dir.join("params").join(format!("{name}.tnsr"));
        let t = tio::load(&path)?;
        if t.shape() != p.value.shape() {
            return Err(Error::Format(format!("{}: shape {:?}, expected {:?}", path.display(), t.shape(), p.value.shape())));
        }
        p.value = t;
        p.zero_grad();
    }
    for (name, b) in store.buffer_names.iter().zip(store.buffers.iter_mut()) {
        let path = dir.join("buffers").join(format!("{name}.tnsr"));
        let t = tio::load(&path)?;
        if t.len() != b.len() {
            return Err(Error::Format(format!("{}: length {}, expected {}", path.display(), t.len(), b.len())));
        }
        *b = t.into_data();
    }
    Ok(())
}
