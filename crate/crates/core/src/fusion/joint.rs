use std::collections::BTreeMap;
use std::path::Path;

use mlfd_numerics::{Mode, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::models::{load_store, save_checkpoint, store_digest, Ctx, LayerDesc, Model, ModelOut, ParamStore, Sequential, EVAL_CHUNK};
use crate::util::{sha256_hex, Hasher};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    /// Dropout on the fused input of a vector fusion layer.
    #[serde(default = "default_fusion_dropout")]
    pub fusion_dropout: f64,
    /// Dropout before the dense layer of a spatial-to-vector trunk block.
    #[serde(default = "default_trunk_dropout")]
    pub trunk_dropout: f64,
}

fn default_fusion_dropout() -> f64 {
    0.85
}

fn default_trunk_dropout() -> f64 {
    0.0
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { fusion_dropout: default_fusion_dropout(), trunk_dropout: default_trunk_dropout() }
    }
}

/// The frozen individual teacher a joint teacher was built on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherRef {
    pub spec_hash: String,
    pub fingerprint: String,
    /// Per-sample embedding shape at the fusion level.
    pub shape: Vec<usize>,
}

/// Declarative joint-teacher layout: everything needed to rebuild its
/// trainable part. An empty layer list is an identity block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSpec {
    /// Level ids `l_1..l_k`; `l_1` is where teacher features are fused.
    pub levels: Vec<String>,
    pub teachers: Vec<TeacherRef>,
    /// Adaptor layers per teacher.
    pub adaptors: Vec<Vec<LayerDesc>>,
    /// Trunk block `NN^{l_c}` per level.
    pub blocks: Vec<Vec<LayerDesc>>,
    pub datasets: Vec<String>,
    /// Classification head layers per dataset.
    pub heads: Vec<Vec<LayerDesc>>,
}

impl JointSpec {
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("joint spec serializes"))
    }

    pub fn fusion_level(&self) -> &str {
        &self.levels[0]
    }
}

fn is_spatial(shape: &[usize]) -> bool {
    shape.len() == 3
}

/// Channel (or unit) count and spatial side of a per-sample shape.
fn width(shape: &[usize]) -> usize {
    shape[0]
}

/// Derives the joint layout from teacher level shapes.
///
/// * Adaptors map each teacher's `l_1` features to `W_1` = the largest
///   teacher width at `l_1`: a pointwise convolution (plus average pooling
///   down to the smallest teacher map) for spatial features, a dense layer
///   for vectors. If any teacher is vector-valued at `l_1`, spatial teachers
///   are globally pooled first.
/// * `NN^{l_1}` on the concatenation: dropout + dense + GELU (vectors) or
///   pointwise conv + batchnorm + GELU (maps).
/// * Later blocks mirror a teacher stage: pool + 3x3 conv + batchnorm + GELU
///   between maps, global pool + dropout + dense + GELU from a map to a vector.
/// * One dense head per dataset on the last block.
pub fn plan_joint(
    levels: &[String],
    level_shapes: &[Vec<Vec<usize>>],
    teachers: Vec<TeacherRef>,
    datasets: &[(String, usize)],
    cfg: &FusionConfig,
) -> Result<JointSpec> {
    if levels.is_empty() {
        return Err(Error::Config("joint teacher needs at least one level".into()));
    }
    if teachers.is_empty() {
        return Err(Error::Config("joint teacher needs at least one teacher".into()));
    }
    // level_shapes[c][i]: teacher i's shape at level c
    let target: Vec<Vec<usize>> = level_shapes
        .iter()
        .map(|shapes| {
            let w = shapes.iter().map(|s| width(s)).max().unwrap_or(1);
            if shapes.iter().all(|s| is_spatial(s)) {
                let side = shapes.iter().map(|s| s[1].min(s[2])).min().unwrap_or(1);
                vec![w, side, side]
            } else {
                vec![w]
            }
        })
        .collect();

    let fused = &target[0];
    let mut adaptors = Vec::with_capacity(teachers.len());
    for t in &teachers {
        let mut a = Vec::new();
        if is_spatial(fused) {
            let side = t.shape[1];
            if t.shape[1] != t.shape[2] || side % fused[1] != 0 {
                return Err(Error::Config(format!("teacher map {:?} cannot be pooled to {}x{}", t.shape, fused[1], fused[2])));
            }
            a.push(LayerDesc::Conv { out_channels: fused[0], kernel: 1, stride: 1, padding: 0, bias: true });
            if side > fused[1] {
                a.push(LayerDesc::AvgPool { size: side / fused[1] });
            }
        } else {
            if is_spatial(&t.shape) {
                a.push(LayerDesc::GlobalAvgPool);
            } else if t.shape.len() != 1 {
                a.push(LayerDesc::Flatten);
            }
            a.push(LayerDesc::dense(fused[0]));
        }
        adaptors.push(a);
    }

    let mut blocks = Vec::with_capacity(levels.len());
    for (c, shape) in target.iter().enumerate() {
        let mut b = Vec::new();
        if c == 0 {
            if is_spatial(shape) {
                b.extend([LayerDesc::Conv { out_channels: shape[0], kernel: 1, stride: 1, padding: 0, bias: true }, LayerDesc::BatchNorm, LayerDesc::Gelu]);
            } else {
                b.extend([LayerDesc::Dropout { p: cfg.fusion_dropout }, LayerDesc::dense(shape[0]), LayerDesc::Gelu]);
            }
        } else {
            let prev = &target[c - 1];
            match (is_spatial(prev), is_spatial(shape)) {
                (true, true) => {
                    if prev[1] % shape[1] != 0 {
                        return Err(Error::Config(format!("level {} map {:?} does not pool to {:?}", levels[c], prev, shape)));
                    }
                    if prev[1] > shape[1] {
                        b.push(LayerDesc::AvgPool { size: prev[1] / shape[1] });
                    }
                    b.extend([LayerDesc::conv(shape[0], 3, 1), LayerDesc::BatchNorm, LayerDesc::Gelu]);
                }
                (true, false) => {
                    b.push(LayerDesc::GlobalAvgPool);
                    if cfg.trunk_dropout > 0.0 {
                        b.push(LayerDesc::Dropout { p: cfg.trunk_dropout });
                    }
                    b.extend([LayerDesc::dense(shape[0]), LayerDesc::Gelu]);
                }
                (false, false) => b.extend([LayerDesc::dense(shape[0]), LayerDesc::Gelu]),
                (false, true) => {
                    return Err(Error::Config(format!("level {} is a map but follows vector level {}", levels[c], levels[c - 1])));
                }
            }
        }
        blocks.push(b);
    }

    let last = target.last().expect("non-empty levels");
    let heads = datasets
        .iter()
        .map(|(_, classes)| {
            let mut h = Vec::new();
            if is_spatial(last) {
                h.push(LayerDesc::GlobalAvgPool);
            }
            h.push(LayerDesc::dense(*classes));
            h
        })
        .collect();

    Ok(JointSpec {
        levels: levels.to_vec(),
        teachers,
        adaptors,
        blocks,
        datasets: datasets.iter().map(|(n, _)| n.clone()).collect(),
        heads,
    })
}

/// Frozen teacher backbones, adaptors, fusion trunk and per-dataset heads.
#[derive(Debug)]
pub struct JointTeacher {
    pub spec: JointSpec,
    /// Optional: only needed for the raw-input path.
    backbones: Vec<Model>,
    adaptors: Vec<Sequential>,
    blocks: Vec<Sequential>,
    heads: Vec<Sequential>,
    /// Every trainable parameter: adaptors, then blocks, then heads.
    pub store: ParamStore,
}

impl JointTeacher {
    pub fn build(spec: JointSpec, seed: u64) -> Result<JointTeacher> {
        let m = spec.teachers.len();
        if spec.adaptors.len() != m || spec.blocks.len() != spec.levels.len() || spec.heads.len() != spec.datasets.len() {
            return Err(Error::Spec("joint spec: adaptor, block or head count mismatch".into()));
        }
        let mut store = ParamStore::new();
        let mut adaptors = Vec::with_capacity(m);
        for (i, (t, a)) in spec.teachers.iter().zip(&spec.adaptors).enumerate() {
            adaptors.push(Sequential::new(a, &t.shape, &mut store, &format!("adaptor{}.", i + 1), seed)?);
        }
        let first = adaptors[0].output_shape().to_vec();
        if let Some((i, a)) = adaptors.iter().enumerate().find(|(_, a)| a.output_shape()[1..] != first[1..]) {
            return Err(Error::Spec(format!(
                "adaptor {} outputs {:?}, adaptor 1 outputs {:?}: extents must agree",
                i + 1,
                a.output_shape(),
                first
            )));
        }
        let mut shape = first.clone();
        shape[0] = adaptors.iter().map(|a| a.output_shape()[0]).sum();
        let mut blocks = Vec::with_capacity(spec.blocks.len());
        for (level, b) in spec.levels.iter().zip(&spec.blocks) {
            let s = Sequential::new(b, &shape, &mut store, &format!("block_{level}."), seed)?;
            shape = s.output_shape().to_vec();
            blocks.push(s);
        }
        let mut heads = Vec::with_capacity(spec.heads.len());
        for (name, h) in spec.datasets.iter().zip(&spec.heads) {
            heads.push(Sequential::new(h, &shape, &mut store, &format!("head_{name}."), seed)?);
        }
        Ok(JointTeacher { spec, backbones: Vec::new(), adaptors, blocks, heads, store })
    }

    /// Attaches the frozen teachers, checking they are the ones the spec names.
    pub fn attach_backbones(&mut self, mut teachers: Vec<Model>) -> Result<()> {
        if teachers.len() != self.spec.teachers.len() {
            return Err(Error::Precondition(format!("{} backbones for {} teachers", teachers.len(), self.spec.teachers.len())));
        }
        for (i, (t, r)) in teachers.iter_mut().zip(&self.spec.teachers).enumerate() {
            if t.fingerprint() != r.fingerprint {
                return Err(Error::StaleCache(format!("teacher {} differs from the one this joint teacher was built on", i + 1)));
            }
            t.freeze();
        }
        self.backbones = teachers;
        Ok(())
    }

    pub fn backbones(&self) -> &[Model] {
        &self.backbones
    }

    pub fn m(&self) -> usize {
        self.spec.teachers.len()
    }

    pub fn classes(&self, task: usize) -> Result<usize> {
        self.heads.get(task).map(|h| h.output_shape()[0]).ok_or(Error::HeadRouting(task))
    }

    pub fn level_shape(&self, level: &str) -> Result<&[usize]> {
        let c = self.level_index(level)?;
        Ok(self.blocks[c].output_shape())
    }

    fn level_index(&self, level: &str) -> Result<usize> {
        self.spec.levels.iter().position(|l| l == level).ok_or_else(|| Error::UnknownLevel(level.to_string()))
    }

    /// Adaptor outputs concatenated along channels, in teacher order.
    pub fn fuse(&self, cx: &mut Ctx, key_base: usize, embeddings: &[Option<Var>]) -> Result<Var> {
        fuse_embeddings(cx, &self.adaptors, &self.store, key_base, embeddings)
    }

    /// Joint forward from fusion-level teacher embeddings (one batch per teacher).
    pub fn forward_cached(&self, cx: &mut Ctx, key_base: usize, embeddings: &[Option<Var>], task: usize, levels: &[String]) -> Result<ModelOut> {
        let head = self.heads.get(task).ok_or(Error::HeadRouting(task))?;
        let want: Vec<usize> = levels.iter().map(|l| self.level_index(l)).collect::<Result<_>>()?;
        let mut h = self.fuse(cx, key_base, embeddings)?;
        let mut taps = BTreeMap::new();
        for (c, block) in self.blocks.iter().enumerate() {
            h = block.forward(cx, &self.store, key_base, h)?;
            if want.contains(&c) {
                taps.insert(self.spec.levels[c].clone(), h);
            }
        }
        let logits = head.forward(cx, &self.store, key_base, h)?;
        Ok(ModelOut { logits, taps })
    }

    /// Joint forward from raw inputs: the frozen backbones run first, in eval mode.
    pub fn forward_raw(&self, cx: &mut Ctx, key_base: usize, x: Var, task: usize, levels: &[String]) -> Result<ModelOut> {
        if self.backbones.is_empty() {
            return Err(Error::Precondition("raw-input joint forward needs the teacher backbones attached".into()));
        }
        self.heads.get(task).ok_or(Error::HeadRouting(task))?;
        let fusion = self.spec.fusion_level().to_string();
        let mut embs = Vec::with_capacity(self.backbones.len());
        for b in &self.backbones {
            let mut sub = Ctx::new(cx.tape, Mode::Eval, cx.seed, cx.step);
            embs.push(Some(b.forward_until(&mut sub, usize::MAX / 2, x, &fusion)?));
        }
        self.forward_cached(cx, key_base, &embs, task, levels)
    }

    /// Eval-mode logits and level embeddings from full per-teacher embedding tensors.
    pub fn infer_cached(&self, embeddings: &[Tensor], task: usize, levels: &[String]) -> Result<(Tensor, BTreeMap<String, Tensor>)> {
        let n = embeddings.first().map(|t| t.shape()[0]).ok_or_else(|| Error::IncompleteInput("no teacher embeddings".into()))?;
        self.infer_chunks(n, levels, |cx, start, end| {
            let vars = embeddings
                .iter()
                .map(|e| Ok(Some(cx.tape.constant(e.slice_rows(start, end)?))))
                .collect::<Result<Vec<_>>>()?;
            self.forward_cached(cx, 0, &vars, task, levels)
        })
    }

    pub fn infer_raw(&self, inputs: &Tensor, task: usize, levels: &[String]) -> Result<(Tensor, BTreeMap<String, Tensor>)> {
        self.infer_chunks(inputs.shape()[0], levels, |cx, start, end| {
            let x = cx.tape.constant(inputs.slice_rows(start, end)?);
            self.forward_raw(cx, 0, x, task, levels)
        })
    }

    fn infer_chunks<F>(&self, n: usize, levels: &[String], mut f: F) -> Result<(Tensor, BTreeMap<String, Tensor>)>
    where
        F: FnMut(&mut Ctx, usize, usize) -> Result<ModelOut>,
    {
        let mut logits = Vec::new();
        let mut taps: BTreeMap<String, Vec<Tensor>> = levels.iter().map(|l| (l.clone(), Vec::new())).collect();
        for start in (0..n).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(n);
            let mut tape = Tape::new();
            let mut cx = Ctx::new(&mut tape, Mode::Eval, 0, 0);
            let out = f(&mut cx, start, end)?;
            logits.push(tape.value(out.logits).clone());
            for (l, v) in &out.taps {
                taps.get_mut(l).expect("requested level").push(tape.value(*v).clone());
            }
        }
        let cat = |parts: &[Tensor]| Tensor::concat_rows(&parts.iter().collect::<Vec<_>>());
        let taps = taps.into_iter().map(|(l, p)| Ok((l, cat(&p)?))).collect::<Result<_>>()?;
        Ok((cat(&logits)?, taps))
    }

    /// Copy of this joint teacher with one more head, for a dataset it was not
    /// trained on. `head` holds the trained head parameters (and buffers) in
    /// the order `layers` declares them. Backbones are not carried over.
    pub fn with_head(&self, dataset: &str, layers: Vec<LayerDesc>, head: &ParamStore) -> Result<JointTeacher> {
        let mut spec = self.spec.clone();
        spec.datasets.push(dataset.to_string());
        spec.heads.push(layers);
        let mut jt = JointTeacher::build(spec, 0)?;
        let (np, nb) = (self.store.params.len(), self.store.buffers.len());
        if jt.store.params.len() != np + head.params.len() || jt.store.buffers.len() != nb + head.buffers.len() {
            return Err(Error::Spec(format!("head for {dataset} does not match its layer list")));
        }
        for (dst, src) in jt.store.params.iter_mut().zip(self.store.params.iter().chain(&head.params)) {
            if dst.value.shape() != src.value.shape() {
                return Err(Error::Spec(format!("head for {dataset}: parameter shape {:?} vs {:?}", src.value.shape(), dst.value.shape())));
            }
            dst.value = src.value.clone();
            dst.frozen = src.frozen;
        }
        for (dst, src) in jt.store.buffers.iter_mut().zip(self.store.buffers.iter().chain(&head.buffers)) {
            dst.clone_from(src);
        }
        Ok(jt)
    }

    pub fn count_params(&self, exclude_frozen: bool) -> usize {
        self.store.count(exclude_frozen) + self.backbones.iter().map(|b| b.count_params(exclude_frozen)).sum::<usize>()
    }

    /// Hash of the layout and every trainable value.
    pub fn fingerprint(&self) -> String {
        let mut h = Hasher::new();
        h.update(self.spec.hash().as_bytes());
        store_digest(&self.store, &mut h);
        h.finish()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &serde_json::to_string_pretty(&self.spec).expect("joint spec serializes"), &self.spec.hash(), &self.store)
    }

    /// Loads the trainable part; attach backbones separately for raw inputs.
    pub fn load(dir: &Path) -> Result<JointTeacher> {
        let sp = dir.join("spec.json");
        if !sp.exists() {
            return Err(Error::Precondition(format!("no joint-teacher checkpoint at {}", dir.display())));
        }
        let text = std::fs::read_to_string(&sp).at(&sp)?;
        let spec: JointSpec = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", sp.display())))?;
        if spec.hash() != crate::models::read_spec_hash(dir)? {
            return Err(Error::Corruption(format!("{}: spec does not match its recorded hash", sp.display())));
        }
        let mut jt = JointTeacher::build(spec, 0)?;
        load_store(dir, &mut jt.store)?;
        Ok(jt)
    }
}

/// Applies each teacher's adaptor to its embedding and concatenates the
/// results along the channel axis in teacher order.
pub fn fuse_embeddings(cx: &mut Ctx, adaptors: &[Sequential], store: &ParamStore, key_base: usize, embeddings: &[Option<Var>]) -> Result<Var> {
    if embeddings.len() != adaptors.len() {
        return Err(Error::IncompleteInput(format!("{} embeddings for {} teachers", embeddings.len(), adaptors.len())));
    }
    let mut outs = Vec::with_capacity(adaptors.len());
    for (i, (a, e)) in adaptors.iter().zip(embeddings).enumerate() {
        let e = e.ok_or_else(|| Error::IncompleteInput(format!("missing embedding of teacher {}", i + 1)))?;
        outs.push(a.forward(cx, store, key_base, e)?);
    }
    if outs.len() == 1 {
        return Ok(outs[0]);
    }
    Ok(cx.tape.concat_channels(&outs)?)
}
