use std::collections::BTreeMap;
use std::ops::Range;

use mlfd_numerics::{rng, xavier_normal, BatchStats, Parameter, Tensor, Var};

use super::layers::{chain_error, Bound, Ctx, Init, Layer, LayerDesc};
use crate::error::{Error, Result};

/// BN running statistics: `r <- (1 - m) r + m batch`.
pub const BN_MOMENTUM: f64 = 0.1;

/// Flat parameter and buffer storage shared by one or more [`Sequential`]s.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    pub params: Vec<Parameter>,
    pub param_names: Vec<String>,
    pub buffers: Vec<Vec<f64>>,
    pub buffer_names: Vec<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self, exclude_frozen: bool) -> usize {
        self.params.iter().filter(|p| !(exclude_frozen && p.frozen)).map(Parameter::numel).sum()
    }

    pub fn freeze(&mut self) {
        mlfd_numerics::param::freeze_all(&mut self.params);
    }

    /// Folds train-mode batch statistics into the running buffers.
    pub fn apply_stats(&mut self, stats: &[(usize, BatchStats)]) {
        for (base, s) in stats {
            for (r, m) in self.buffers[*base].iter_mut().zip(&s.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            for (r, v) in self.buffers[base + 1].iter_mut().zip(&s.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
    }

    /// Bitwise equality of values and buffers.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| a.value.bit_eq(&b.value))
            && self.buffers.len() == other.buffers.len()
            && self
                .buffers
                .iter()
                .zip(&other.buffers)
                .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()))
    }
}

/// An ordered layer chain whose parameters live in a [`ParamStore`].
/// Boundary `k` is the activation entering layer `k`; boundary `len()` is the output.
#[derive(Debug)]
pub struct Sequential {
    layers: Vec<Box<dyn Layer>>,
    params: Vec<Range<usize>>,
    buffers: Vec<Range<usize>>,
    input: Vec<usize>,
    /// Distinguishes dropout streams of chains sharing one seed.
    op_base: u64,
}

impl Sequential {
    /// Builds the chain, appending freshly initialized parameters to `store`.
    /// `prefix` names the parameters; `seed` drives Xavier draws.
    pub fn new(descs: &[LayerDesc], input: &[usize], store: &mut ParamStore, prefix: &str, seed: u64) -> Result<Self> {
        let mut layers: Vec<Box<dyn Layer>> = Vec::with_capacity(descs.len());
        let mut shape = input.to_vec();
        for (i, d) in descs.iter().enumerate() {
            let prev = i.checked_sub(1).map(|j| (j, &descs[j]));
            let layer = d.build(&shape).map_err(|why| chain_error(i, d, prev, why))?;
            shape = layer.out_shape().to_vec();
            layers.push(layer);
        }
        let mut params = Vec::with_capacity(layers.len());
        let mut buffers = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            let start = store.params.len();
            for decl in layer.params() {
                let key = store.params.len() as u64;
                let value = match decl.init {
                    Init::Xavier { fan_in, fan_out } => {
                        let mut r = rng::rng(rng::derive(seed, &[key]));
                        xavier_normal(&decl.shape, fan_in, fan_out, &mut r)?
                    }
                    Init::Zeros => Tensor::zeros(&decl.shape),
                    Init::Ones => Tensor::full(&decl.shape, 1.0),
                };
                store.params.push(Parameter::new(value));
                store.param_names.push(format!("{prefix}{i:02}_{}.{}", layer.kind(), decl.name));
            }
            params.push(start..store.params.len());
            let bstart = store.buffers.len();
            for decl in layer.buffers() {
                store.buffers.push(vec![decl.fill; decl.len]);
                store.buffer_names.push(format!("{prefix}{i:02}_{}.{}", layer.kind(), decl.name));
            }
            buffers.push(bstart..store.buffers.len());
        }
        let op_base = rng::derive_named(0, prefix);
        Ok(Sequential { layers, params, buffers, input: input.to_vec(), op_base })
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input
    }

    /// Per-sample shape at boundary `k`.
    pub fn boundary_shape(&self, k: usize) -> &[usize] {
        if k == 0 {
            &self.input
        } else {
            self.layers[k - 1].out_shape()
        }
    }

    pub fn output_shape(&self) -> &[usize] {
        self.boundary_shape(self.layers.len())
    }

    pub fn layer_kind(&self, i: usize) -> &'static str {
        self.layers[i].kind()
    }

    /// Store range holding this chain's parameters.
    pub fn param_range(&self) -> Range<usize> {
        let start = self.params.first().map_or(0, |r| r.start);
        let end = self.params.last().map_or(start, |r| r.end);
        start..end
    }

    /// Runs layers `from..to`, recording the activation at each boundary in `record`.
    /// `key_base` is the tape key of `store.params[0]`.
    pub fn run(
        &self,
        cx: &mut Ctx,
        store: &ParamStore,
        key_base: usize,
        x: Var,
        from: usize,
        to: usize,
        record: &[usize],
    ) -> Result<(Var, BTreeMap<usize, Var>)> {
        if from > to || to > self.layers.len() {
            return Err(Error::Precondition(format!("layer range {from}..{to} outside 0..{}", self.layers.len())));
        }
        let mut seen = BTreeMap::new();
        let mut h = x;
        if record.contains(&from) {
            seen.insert(from, h);
        }
        for i in from..to {
            let pr = self.params[i].clone();
            let br = self.buffers[i].clone();
            let bound = Bound {
                params: &store.params[pr.clone()],
                key: key_base + pr.start,
                buffers: &store.buffers[br.clone()],
                buffer_base: br.start,
                op_index: self.op_base.wrapping_add(i as u64),
            };
            h = self.layers[i].forward(cx, &bound, h)?;
            if record.contains(&(i + 1)) {
                seen.insert(i + 1, h);
            }
        }
        Ok((h, seen))
    }

    /// Full forward pass without recording.
    pub fn forward(&self, cx: &mut Ctx, store: &ParamStore, key_base: usize, x: Var) -> Result<Var> {
        Ok(self.run(cx, store, key_base, x, 0, self.layers.len(), &[])?.0)
    }
}
