//! Multi-level distillation: hard-label cross-entropy, temperature-softened
//! teacher cross-entropy and per-level embedding regression, trained offline
//! from targets extracted once from the joint teacher.

mod targets;

pub use targets::{extract_distill_targets, targets_entry, DistillTargets, PROBS};

use mlfd_numerics::{softmax_with_temperature, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::{Batch, LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::models::{Ctx, LayerDesc, Model, ModelSpec, ParamStore, Sequential};
use crate::train::{hard_ce, Engine, Objective, TrainConfig, TrainLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KDConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// One weight per distilled level, in depth order.
    #[serde(default = "default_betas")]
    pub betas: Vec<f64>,
    #[serde(default = "default_tau")]
    pub tau: f64,
}

fn default_alpha() -> f64 {
    0.6
}

fn default_betas() -> Vec<f64> {
    vec![0.2, 0.2]
}

fn default_tau() -> f64 {
    2.0
}

impl Default for KDConfig {
    fn default() -> Self {
        KDConfig { alpha: default_alpha(), betas: default_betas(), tau: default_tau() }
    }
}

impl KDConfig {
    pub fn validate(&self, levels: usize) -> Result<()> {
        if !(self.alpha >= 0.0) || self.betas.iter().any(|b| !(*b >= 0.0)) {
            return Err(Error::Config(format!("alpha and betas must be >= 0 (alpha={}, betas={:?})", self.alpha, self.betas)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau={} must be > 0", self.tau)));
        }
        if self.betas.len() != levels {
            return Err(Error::Config(format!("{} betas for {levels} distilled levels", self.betas.len())));
        }
        Ok(())
    }
}

/// Component values of one loss evaluation. `soft` is the unscaled
/// softened cross-entropy; the total weights it by `alpha * tau^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct KdParts {
    pub total: f64,
    pub hard: f64,
    pub soft: f64,
    pub mse: Vec<f64>,
}

impl KdParts {
    pub fn named(&self, levels: &[String]) -> Vec<(String, f64)> {
        let mut v = vec![("total".to_string(), self.total), ("ce".to_string(), self.hard), ("soft".to_string(), self.soft)];
        v.extend(levels.iter().zip(&self.mse).map(|(l, m)| (format!("mse_{l}"), *m)));
        v
    }
}

/// Teacher probabilities re-tempered: `softmax(ln p / tau)`, which equals
/// `softmax(z / tau)` for the logits `z` that produced `p`.
pub fn soften(probs: &Tensor, tau: f64) -> Result<Tensor> {
    if tau == 1.0 {
        return Ok(probs.clone());
    }
    let logs: Vec<f64> = probs.data().iter().map(|p| p.max(1e-300).ln()).collect();
    Ok(softmax_with_temperature(&Tensor::new(probs.shape().to_vec(), logs)?, tau)?)
}

/// `CE(y, s) + alpha * tau^2 * CE(t^tau, s^tau) + sum_c beta_c * MSE(e_s^c, e_t^c)`.
///
/// `student_embs` are already projected to the teacher shapes. Terms with a
/// zero weight are evaluated off the tape, so with every weight zero the
/// graph is exactly the plain cross-entropy graph.
pub fn kd_loss(
    tape: &mut Tape,
    logits: Var,
    one_hot: &Tensor,
    student_embs: &[Var],
    teacher_probs: &Tensor,
    teacher_embs: &[Tensor],
    cfg: &KDConfig,
) -> Result<(Var, KdParts)> {
    if cfg.betas.len() != student_embs.len() || teacher_embs.len() != student_embs.len() {
        return Err(Error::Config(format!(
            "{} betas, {} student and {} teacher embeddings",
            cfg.betas.len(),
            student_embs.len(),
            teacher_embs.len()
        )));
    }
    let hard = hard_ce(tape, logits, one_hot)?;
    let mut total = hard;

    let soft_target = soften(teacher_probs, cfg.tau)?;
    let soft = if cfg.alpha > 0.0 {
        let s = tape.softmax(logits, cfg.tau)?;
        let t = tape.constant(soft_target);
        let ce = tape.cross_entropy(s, t)?;
        let w = tape.scale(ce, cfg.alpha * cfg.tau * cfg.tau)?;
        total = tape.add(total, w)?;
        tape.value(ce).item()
    } else {
        let s = softmax_with_temperature(tape.value(logits), cfg.tau)?;
        mlfd_numerics::cross_entropy(&s, &soft_target)?
    };

    let mut mse = Vec::with_capacity(student_embs.len());
    for ((&e, t), &beta) in student_embs.iter().zip(teacher_embs).zip(&cfg.betas) {
        if tape.value(e).shape() != t.shape() {
            return Err(Error::Precondition(format!("student embedding {:?} vs teacher {:?}", tape.value(e).shape(), t.shape())));
        }
        if beta > 0.0 {
            let tv = tape.constant(t.clone());
            let m = tape.mse(e, tv)?;
            let w = tape.scale(m, beta)?;
            total = tape.add(total, w)?;
            mse.push(tape.value(m).item());
        } else {
            mse.push(mlfd_numerics::mse(tape.value(e), t)?);
        }
    }
    let parts = KdParts { total: tape.value(total).item(), hard: tape.value(hard).item(), soft, mse };
    Ok((total, parts))
}

/// Layers projecting a student embedding onto the teacher's shape; empty
/// when the shapes already agree.
pub fn plan_student_adaptor(student: &[usize], teacher: &[usize]) -> Result<Vec<LayerDesc>> {
    if student == teacher {
        return Ok(Vec::new());
    }
    match (student.len(), teacher.len()) {
        (3, 3) => {
            if student[1] < teacher[1] || student[1] % teacher[1] != 0 || student[1] != student[2] {
                return Err(Error::Config(format!("student map {student:?} cannot be reduced to teacher map {teacher:?}")));
            }
            let mut v = vec![LayerDesc::Conv { out_channels: teacher[0], kernel: 1, stride: 1, padding: 0, bias: true }];
            if student[1] > teacher[1] {
                v.push(LayerDesc::AvgPool { size: student[1] / teacher[1] });
            }
            Ok(v)
        }
        (3, 1) => Ok(vec![LayerDesc::GlobalAvgPool, LayerDesc::dense(teacher[0])]),
        (1, 1) => Ok(vec![LayerDesc::dense(teacher[0])]),
        _ => Err(Error::Config(format!("no adaptor from student shape {student:?} to teacher shape {teacher:?}"))),
    }
}

/// Training-only projections, one per distilled level. Never part of the
/// student checkpoint.
#[derive(Debug)]
pub struct StudentAdaptors {
    nets: Vec<Sequential>,
    pub store: ParamStore,
}

impl StudentAdaptors {
    pub fn build(student: &Model, levels: &[String], teacher_shapes: &[Vec<usize>], seed: u64) -> Result<StudentAdaptors> {
        let mut store = ParamStore::new();
        let mut nets = Vec::with_capacity(levels.len());
        for (l, t) in levels.iter().zip(teacher_shapes) {
            let s = student.level_shape(l).map_err(|_| Error::Config(format!("level {l} is not a tap of student {}", student.spec.name)))?;
            let descs = plan_student_adaptor(s, t)?;
            nets.push(Sequential::new(&descs, s, &mut store, &format!("student_adaptor_{l}."), seed)?);
        }
        Ok(StudentAdaptors { nets, store })
    }

    pub fn is_identity(&self, level: usize) -> bool {
        self.nets[level].is_empty()
    }

    pub fn apply(&self, cx: &mut Ctx, key_base: usize, level: usize, x: Var) -> Result<Var> {
        self.nets[level].forward(cx, &self.store, key_base, x)
    }
}

/// Student plus its adaptors trained on one dataset against fixed targets.
pub struct KdObjective<'a> {
    pub student: &'a mut Model,
    pub adaptors: &'a mut StudentAdaptors,
    pub data: &'a LabeledDataset,
    pub targets: &'a DistillTargets,
    pub cfg: &'a KDConfig,
}

impl Objective for KdObjective<'_> {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![&self.student.store, &self.adaptors.store]
    }
    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.student.store, &mut self.adaptors.store]
    }
    fn loss(&self, cx: &mut Ctx, _: usize, batch: &Batch) -> Result<(Var, Vec<(String, f64)>)> {
        let levels = &self.targets.levels;
        let (probs, embs) = self.targets.rows(&batch.indices)?;
        let x = cx.tape.constant(batch.inputs.clone());
        let out = self.student.forward(cx, 0, x, levels)?;
        let adaptor_base = self.student.store.params.len();
        let mut projected = Vec::with_capacity(levels.len());
        for (c, l) in levels.iter().enumerate() {
            projected.push(self.adaptors.apply(cx, adaptor_base, c, out.taps[l])?);
        }
        let (total, parts) = kd_loss(cx.tape, out.logits, &batch.one_hot, &projected, &probs, &embs, self.cfg)?;
        Ok((total, parts.named(levels)))
    }
    fn scores(&self, _: usize, split: Split) -> Result<(Tensor, usize)> {
        Ok((self.student.predict(&self.data.split_inputs(split)?)?, 0))
    }
}

/// Outcome of one distillation run.
#[derive(Debug)]
pub struct StudentRun {
    pub student: Model,
    pub log: TrainLog,
}

/// Trains a freshly initialized student with the multi-level loss.
///
/// `init_seed` and `seed` play the same roles as for a supervised run, so
/// with every weight at zero this reproduces the plain baseline exactly.
pub fn train_student(
    spec: &ModelSpec,
    data: &LabeledDataset,
    targets: &DistillTargets,
    cfg: &KDConfig,
    train: &TrainConfig,
    init_seed: u64,
    seed: u64,
    track_test: bool,
) -> Result<StudentRun> {
    cfg.validate(targets.levels.len())?;
    if targets.dataset != data.name {
        return Err(Error::Precondition(format!("targets are for {}, not {}", targets.dataset, data.name)));
    }
    if let Some(&i) = data.splits.train.iter().find(|&&i| !targets.covers(i)) {
        return Err(Error::Precondition(format!("{}: no distillation target for training sample {i}", data.name)));
    }
    let mut student = Model::build(spec, init_seed)?;
    if student.classes() != targets.probs.shape()[1] {
        return Err(Error::Precondition(format!("student has {} classes, targets {}", student.classes(), targets.probs.shape()[1])));
    }
    for l in &targets.levels {
        if !student.spec.taps.contains(l) {
            return Err(Error::Config(format!("level {l} is not a tap of student {}", spec.name)));
        }
    }
    let shapes: Vec<Vec<usize>> = targets.levels.iter().map(|l| targets.embeddings[l].shape()[1..].to_vec()).collect();
    let mut adaptors = StudentAdaptors::build(&student, &targets.levels, &shapes, mlfd_numerics::rng::derive_named(init_seed, "student_adaptor"))?;
    let mut obj = KdObjective { student: &mut student, adaptors: &mut adaptors, data, targets, cfg };
    let log = Engine { tasks: vec![data], cfg: train, seed, track_test }.fit(&mut obj)?;
    Ok(StudentRun { student, log })
}
