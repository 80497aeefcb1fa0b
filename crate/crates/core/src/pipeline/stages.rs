use std::time::Instant;

use mlfd_numerics::{softmax_with_temperature, Tensor};

use super::run::{Done, JobDir, JobMeta, Record};
use super::{Experiment, ModelChoice};
use crate::data::{LabeledDataset, Split};
use crate::distill::{extract_distill_targets, targets_entry, train_student, DistillTargets, PROBS};
use crate::error::{Error, Result};
use crate::fusion::{
    cache_key, load_teacher_embeddings, plan_joint, precompute_teacher_embeddings, teacher_owner, train_joint_teacher, CacheEntry,
    EmbeddingCache, JointTeacher, Owner, TeacherRef,
};
use crate::models::{tap_set_levels, LayerDesc, Model, ModelSpec, Tap, TapSet};
use crate::train::{accuracy, Engine, Supervised, TrainConfig, TrainLog};
use crate::util::Hasher;

pub(super) const CHECKPOINT: &str = "checkpoint";

/// What a job's `train` step hands back.
pub(super) struct Trained<T> {
    pub value: T,
    pub log: Option<TrainLog>,
    pub fingerprint: String,
    pub skipped: bool,
}

/// Runs one job unless it already finished with the same inputs, in which
/// case its checkpoint is loaded instead.
pub(super) fn job<T>(
    x: &Experiment,
    rel: &str,
    meta: JobMeta,
    input_hash: &str,
    task_names: &[String],
    load: impl FnOnce(&JobDir) -> Result<(T, String)>,
    train: impl FnOnce(&JobDir) -> Result<Trained<T>>,
    evaluate: impl FnOnce(&T, &Done) -> Result<Vec<Record>>,
) -> Result<T> {
    let dir = x.run.job(rel);
    if let Some(done) = dir.done(input_hash)? {
        let (value, fp) = load(&dir)?;
        if fp != done.fingerprint {
            return Err(Error::Corruption(format!("{}: checkpoint does not match its completion record", dir.dir.display())));
        }
        x.progress(&format!("{rel}: up to date"));
        return Ok(value);
    }
    dir.reset()?;
    x.progress(&format!("{rel}: training"));
    let started = Instant::now();
    let t = train(&dir)?;
    let (best_epoch, epochs_run) = t.log.as_ref().map_or((0, 0), |l| (l.best_epoch, l.epochs_run));
    let done = Done { input_hash: input_hash.to_string(), fingerprint: t.fingerprint, best_epoch, epochs_run, skipped_training: t.skipped, meta };
    let records = evaluate(&t.value, &done)?;
    dir.log(&format!(
        "{} in {:.1}s: best epoch {best_epoch} of {epochs_run}",
        if t.skipped { "skipped training (pre-trained checkpoint)" } else { "trained" },
        started.elapsed().as_secs_f64()
    ))?;
    for r in &records {
        dir.log(&format!("{} {}: acc@1 {:.2} acc@{} {:.2}", r.dataset, r.split, r.acc1, r.k5, r.acc5))?;
    }
    dir.finish(&done, t.log.as_ref(), task_names, &records)?;
    Ok(t.value)
}

fn train_json(c: &TrainConfig) -> String {
    serde_json::to_string(c).expect("train config serializes")
}

fn test_record(meta: &JobMeta, d: &LabeledDataset, scores: &Tensor, offset: usize, done: &Done) -> Record {
    Record::new(meta, &d.name, Split::Test, accuracy(scores, &d.split_labels(Split::Test), offset), done)
}

fn meta(rep: u64, method: &str, tap: &str, model: &str) -> JobMeta {
    JobMeta { replicate: rep, method: method.into(), tap_set: tap.into(), model: model.into() }
}

fn load_model(dir: &JobDir) -> Result<(Model, String)> {
    let m = Model::load(&dir.path(CHECKPOINT), None)?;
    let fp = m.fingerprint();
    Ok((m, fp))
}

fn supervised(model: &mut Model, d: &LabeledDataset, cfg: &TrainConfig, seed: u64, curves: bool) -> Result<TrainLog> {
    Engine { tasks: vec![d], cfg, seed, track_test: curves }.fit(&mut Supervised { model, data: d })
}

pub(super) fn teacher_spec(x: &Experiment, k: usize, d: usize, choice: &ModelChoice) -> Result<Option<ModelSpec>> {
    if choice.arch.is_none() && choice.layers.is_none() {
        return Ok(None);
    }
    let data = &x.datasets[d];
    choice.spec(&format!("teacher_{}", k + 1), data.sample_shape(), data.classes).map(Some)
}

/// Individual teachers, one job each. With `train` off, missing checkpoints
/// are a precondition error.
pub fn run_stage1(x: &Experiment, rep: u64) -> Result<Vec<Model>> {
    stage1(x, rep, true)
}

pub fn load_teachers(x: &Experiment, rep: u64) -> Result<Vec<Model>> {
    stage1(x, rep, false)
}

fn stage1(x: &Experiment, rep: u64, allow_train: bool) -> Result<Vec<Model>> {
    let plan = x.plan();
    let items: Vec<(usize, (usize, usize))> = plan.teachers.iter().copied().enumerate().collect();
    x.par_map(&items, |&(k, (d, c))| {
        let choice = &x.cfg().teachers[c];
        let data = &x.datasets[d];
        let name = format!("teacher_{}", k + 1);
        let spec = teacher_spec(x, k, d, choice)?;
        let cfg = &x.cfg().train.teacher;
        let (init, seed) = (x.job_seed(rep, &format!("init/{name}")), x.job_seed(rep, &format!("train/{name}")));
        let mut h = Hasher::new();
        h.update(b"teacher").update(x.data_hash(d).as_bytes()).update(train_json(cfg).as_bytes());
        h.update(spec.as_ref().map_or(String::new(), |s| s.hash()).as_bytes());
        h.update(&init.to_le_bytes()).update(&seed.to_le_bytes()).update(&[x.cfg().curves as u8]);
        if let Some(p) = &choice.checkpoint {
            h.update(p.to_string_lossy().as_bytes());
        }
        let rel = format!("rep{rep}/stage1/{name}");
        let hash = h.finish();
        if !allow_train && x.run.job(&rel).done(&hash)?.is_none() {
            return Err(Error::Precondition(format!("no trained {name} for replicate {rep}; run train-teacher first")));
        }
        job(
            x,
            &rel,
            meta(rep, "teacher", "-", &name),
            &hash,
            &[data.name.clone()],
            load_model,
            |dir| {
                if let Some(p) = &choice.checkpoint {
                    let m = Model::load(p, None)?;
                    if m.spec.input != data.sample_shape() || m.classes() != data.classes {
                        return Err(Error::Precondition(format!("{}: checkpoint does not fit dataset {}", p.display(), data.name)));
                    }
                    m.save(&dir.path(CHECKPOINT))?;
                    let fp = m.fingerprint();
                    return Ok(Trained { value: m, log: None, fingerprint: fp, skipped: true });
                }
                let spec = spec.as_ref().expect("arch or layers given");
                let mut m = Model::build(spec, init)?;
                let log = supervised(&mut m, data, cfg, seed, x.cfg().curves)?;
                m.save(&dir.path(CHECKPOINT))?;
                let fp = m.fingerprint();
                Ok(Trained { value: m, log: Some(log), fingerprint: fp, skipped: false })
            },
            |m, done| {
                let s = m.predict(&data.split_inputs(Split::Test)?)?;
                Ok(vec![test_record(&done.meta, data, &s, 0, done)])
            },
        )
    })
}

fn teacher_cache_key(t: &Model, rep: u64, k: usize) -> String {
    cache_key(&t.spec_hash(), &format!("rep{rep}/teacher_{}", k + 1))
}

/// Opens (or, with `build`, fills) each teacher's cache entry at `level`
/// for every dataset the plan embeds.
pub fn build_teacher_caches(x: &Experiment, rep: u64, teachers: &[Model], level: &str, build: bool, rebuild_stale: bool) -> Result<Vec<CacheEntry>> {
    let plan = x.plan();
    let datasets: Vec<&LabeledDataset> = plan.embedded().iter().map(|&d| &x.datasets[d]).collect();
    let items: Vec<usize> = (0..teachers.len()).collect();
    x.par_map(&items, |&k| {
        let t = &teachers[k];
        let key = teacher_cache_key(t, rep, k);
        if !build {
            return x.cache.existing(&key, teacher_owner(t));
        }
        let entry = match x.cache.entry(&key, teacher_owner(t)) {
            Err(Error::StaleCache(msg)) if rebuild_stale => {
                x.progress(&format!("rebuilding stale cache: {msg}"));
                x.cache.invalidate(&key)?;
                x.cache.entry(&key, teacher_owner(t))?
            }
            other => other?,
        };
        let rows = precompute_teacher_embeddings(&entry, t, &datasets, level)?;
        if rows > 0 {
            x.progress(&format!("cached {rows} rows of teacher_{} at {level}", k + 1));
        }
        Ok(entry)
    })
}

/// A trained joint teacher plus the cached teacher embeddings it consumes.
#[derive(Debug)]
pub struct JointOut {
    pub tap: String,
    pub joint: JointTeacher,
    /// Joint teacher extended with a head for the left-out dataset.
    pub probe: Option<JointTeacher>,
    /// Per dataset: fusion-level embeddings of every sample, one per teacher.
    pub embeddings: Vec<Option<Vec<Tensor>>>,
}

/// Builds the caches, then trains the joint teacher (and the probe head of
/// a left-out dataset). With `allow_train` off, both must already exist.
pub fn run_stage2(x: &Experiment, rep: u64, tap: &str, teachers: &[Model], allow_train: bool) -> Result<JointOut> {
    let plan = x.plan();
    if !plan.fused() {
        return Err(Error::Config(format!("variant {} has no joint teacher", x.cfg().variant.as_str())));
    }
    let levels = tap_set_levels(tap)?;
    let fusion = levels[0].clone();
    let entries = build_teacher_caches(x, rep, teachers, &fusion, allow_train, true)?;
    let mut embeddings: Vec<Option<Vec<Tensor>>> = vec![None; x.datasets.len()];
    for d in plan.embedded() {
        embeddings[d] = Some(load_teacher_embeddings(&entries, &x.datasets[d], &fusion)?);
    }

    let shapes: Vec<Vec<Vec<usize>>> = levels
        .iter()
        .map(|l| teachers.iter().map(|t| t.level_shape(l).map(|s| s.to_vec())).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let refs: Vec<TeacherRef> = teachers
        .iter()
        .map(|t| Ok(TeacherRef { spec_hash: t.spec_hash(), fingerprint: t.fingerprint(), shape: t.level_shape(&fusion)?.to_vec() }))
        .collect::<Result<_>>()?;
    let names: Vec<(String, usize)> = plan.joint.iter().map(|&d| (x.datasets[d].name.clone(), x.datasets[d].classes)).collect();
    let spec = plan_joint(&levels, &shapes, refs, &names, &x.cfg().fusion)?;
    let cfg = &x.cfg().train.joint;
    let (init, seed) = (x.job_seed(rep, &format!("init/joint_{tap}")), x.job_seed(rep, &format!("train/joint_{tap}")));
    let mut h = Hasher::new();
    h.update(b"joint").update(spec.hash().as_bytes()).update(train_json(cfg).as_bytes());
    h.update(&init.to_le_bytes()).update(&seed.to_le_bytes()).update(&[x.cfg().curves as u8]);
    for &d in &plan.joint {
        h.update(x.data_hash(d).as_bytes());
    }
    let hash = h.finish();
    let rel = format!("rep{rep}/stage2/{tap}/joint");
    if !allow_train && x.run.job(&rel).done(&hash)?.is_none() {
        return Err(Error::Precondition(format!("no trained joint teacher for {tap}, replicate {rep}; run train-joint first")));
    }
    let data: Vec<&LabeledDataset> = plan.joint.iter().map(|&d| &x.datasets[d]).collect();
    let embs: Vec<Vec<Tensor>> = plan.joint.iter().map(|&d| embeddings[d].clone().expect("embedded")).collect();
    let task_names: Vec<String> = data.iter().map(|d| d.name.clone()).collect();
    let joint = job(
        x,
        &rel,
        meta(rep, "joint-teacher", tap, "joint"),
        &hash,
        &task_names,
        |dir| {
            let j = JointTeacher::load(&dir.path(CHECKPOINT))?;
            let fp = j.fingerprint();
            Ok((j, fp))
        },
        |dir| {
            let before: Vec<String> = teachers.iter().map(|t| t.fingerprint()).collect();
            let mut jt = JointTeacher::build(spec.clone(), init)?;
            let log = train_joint_teacher(&mut jt, &data, &embs, cfg, seed, x.cfg().curves)?;
            if teachers.iter().zip(&before).any(|(t, b)| &t.fingerprint() != b) || jt.spec.teachers.iter().zip(&before).any(|(r, b)| &r.fingerprint != b) {
                return Err(Error::Precondition("an individual teacher changed during joint training".into()));
            }
            dir.log("individual teacher fingerprints unchanged by joint training")?;
            jt.save(&dir.path(CHECKPOINT))?;
            let fp = jt.fingerprint();
            Ok(Trained { value: jt, log: Some(log), fingerprint: fp, skipped: false })
        },
        |jt, done| {
            let mut out = Vec::new();
            for (task, d) in data.iter().enumerate() {
                let e = test_rows(&embs[task], d)?;
                out.push(test_record(&done.meta, d, &jt.infer_cached(&e, task, &[])?.0, 0, done));
            }
            Ok(out)
        },
    )?;

    let probe = match plan.probe {
        Some(e) => Some(probe_head(x, rep, tap, &joint, &x.datasets[e], embeddings[e].as_ref().expect("embedded"), allow_train)?),
        None => None,
    };
    Ok(JointOut { tap: tap.to_string(), joint, probe, embeddings })
}

fn test_rows(embs: &[Tensor], d: &LabeledDataset) -> Result<Vec<Tensor>> {
    let idx = d.splits.get(Split::Test);
    Ok(embs.iter().map(|e| e.select_rows(idx)).collect::<std::result::Result<_, _>>()?)
}

/// Fits a head for a dataset the joint teacher never saw, on its frozen
/// trunk features, and returns the joint teacher extended with that head.
fn probe_head(x: &Experiment, rep: u64, tap: &str, joint: &JointTeacher, d: &LabeledDataset, embs: &[Tensor], allow_train: bool) -> Result<JointTeacher> {
    let name = format!("probe_{}", d.name);
    let cfg = &x.cfg().train.probe;
    let (init, seed) = (x.job_seed(rep, &format!("init/{name}_{tap}")), x.job_seed(rep, &format!("train/{name}_{tap}")));
    let mut h = Hasher::new();
    h.update(b"probe").update(joint.fingerprint().as_bytes()).update(x.data_hash(x.dataset_index(&d.name)?).as_bytes());
    h.update(train_json(cfg).as_bytes()).update(&init.to_le_bytes()).update(&seed.to_le_bytes()).update(&[x.cfg().curves as u8]);
    let hash = h.finish();
    let rel = format!("rep{rep}/stage2/{tap}/{name}");
    if !allow_train && x.run.job(&rel).done(&hash)?.is_none() {
        return Err(Error::Precondition(format!("no probe head for {} under {tap}; run train-joint first", d.name)));
    }
    let task = joint.spec.datasets.len();
    job(
        x,
        &rel,
        meta(rep, "joint-teacher", tap, &format!("joint+{name}")),
        &hash,
        &[d.name.clone()],
        |dir| {
            let j = JointTeacher::load(&dir.path(CHECKPOINT))?;
            let fp = j.fingerprint();
            Ok((j, fp))
        },
        |dir| {
            let last = joint.spec.levels.last().expect("levels").clone();
            let (_, mut taps) = joint.infer_cached(embs, 0, &[last.clone()])?;
            let feats = taps.remove(&last).expect("requested level");
            let features = LabeledDataset::new(d.name.clone(), feats, d.labels.clone(), d.classes, d.splits.clone())?;
            let input = features.sample_shape().to_vec();
            let layers = if input.len() == 3 { vec![LayerDesc::GlobalAvgPool] } else { Vec::new() };
            let spec = ModelSpec { name: name.clone(), input, layers: layers.clone(), head: d.classes, taps: TapSet::new(vec![Tap::new("top", layers.len())])? };
            let mut head = Model::build(&spec, init)?;
            let log = supervised(&mut head, &features, cfg, seed, x.cfg().curves)?;
            let mut head_layers = layers;
            head_layers.push(LayerDesc::dense(d.classes));
            let jt = joint.with_head(&d.name, head_layers, &head.store)?;
            jt.save(&dir.path(CHECKPOINT))?;
            let fp = jt.fingerprint();
            Ok(Trained { value: jt, log: Some(log), fingerprint: fp, skipped: false })
        },
        |jt, done| {
            let e = test_rows(embs, d)?;
            Ok(vec![test_record(&done.meta, d, &jt.infer_cached(&e, task, &[])?.0, 0, done)])
        },
    )
}

/// Loads a finished joint teacher (and its cached inputs) without training.
pub fn load_joint(x: &Experiment, rep: u64, tap: &str) -> Result<JointOut> {
    let teachers = load_teachers(x, rep)?;
    run_stage2(x, rep, tap, &teachers, false)
}

/// Distillation targets for the student of dataset `d`: from the joint
/// teacher (extended with a probe head when `d` was left out), or from the
/// dataset's own teacher without fusion. Cached; re-extraction is skipped.
pub fn extract_targets(x: &Experiment, rep: u64, tap: &str, teachers: &[Model], joint: Option<&JointOut>, d: usize) -> Result<(DistillTargets, Owner)> {
    let plan = x.plan();
    let levels = tap_set_levels(tap)?;
    let data = &x.datasets[d];
    let rebuild = |cache: &EmbeddingCache, key: &str, owner: Owner| -> Result<CacheEntry> {
        match cache.entry(key, owner.clone()) {
            Err(Error::StaleCache(_)) => {
                cache.invalidate(key)?;
                cache.entry(key, owner)
            }
            other => other,
        }
    };
    let complete = |e: &CacheEntry| e.has(&data.name, Split::Train, PROBS) && levels.iter().all(|l| e.has(&data.name, Split::Train, l));
    if plan.fused() {
        let jo = joint.ok_or_else(|| Error::Precondition("distillation targets need a trained joint teacher".into()))?;
        let (jt, task) = if plan.probe == Some(d) {
            let p = jo.probe.as_ref().ok_or_else(|| Error::Precondition(format!("no probe head for {}", data.name)))?;
            (p, p.spec.datasets.len() - 1)
        } else {
            let task = plan.joint.iter().position(|&j| j == d).ok_or(Error::HeadRouting(d))?;
            (&jo.joint, task)
        };
        let owner = Owner { spec_hash: jt.spec.hash(), fingerprint: jt.fingerprint() };
        let entry = match targets_entry(&x.cache, jt, &format!("rep{rep}/{tap}")) {
            Err(Error::StaleCache(_)) => rebuild(&x.cache, &cache_key(&owner.spec_hash, &format!("targets/rep{rep}/{tap}")), owner.clone())?,
            other => other?,
        };
        if complete(&entry) {
            return Ok((DistillTargets::load(&entry, &data.name, &levels)?, owner));
        }
        let embs = jo.embeddings[d].as_ref().ok_or_else(|| Error::Precondition(format!("no cached teacher embeddings for {}", data.name)))?;
        let t = extract_distill_targets(jt, task, data, embs, &levels)?;
        t.save(&entry)?;
        Ok((t, owner))
    } else {
        let k = plan.own_teacher(d).ok_or_else(|| Error::Precondition(format!("no individual teacher for {}", data.name)))?;
        let teacher = &teachers[k];
        let owner = teacher_owner(teacher);
        let key = cache_key(&owner.spec_hash, &format!("targets/rep{rep}/{tap}/teacher_{}", k + 1));
        let entry = rebuild(&x.cache, &key, owner.clone())?;
        if complete(&entry) {
            return Ok((DistillTargets::load(&entry, &data.name, &levels)?, owner));
        }
        let idx = data.splits.get(Split::Train);
        let (logits, taps) = teacher.infer(&data.split_inputs(Split::Train)?, &levels)?;
        let t = DistillTargets::new(&data.name, levels, idx.to_vec(), softmax_with_temperature(&logits, 1.0)?, taps)?;
        t.save(&entry)?;
        Ok((t, owner))
    }
}

pub(super) fn student_spec(x: &Experiment, d: usize, name: &str) -> Result<ModelSpec> {
    let data = &x.datasets[d];
    x.cfg().student_choice(d).spec(name, data.sample_shape(), data.classes)
}

/// `(init, train)` seeds shared by the student of dataset `d` and its dataset-specific baseline.
pub(super) fn student_seeds(x: &Experiment, rep: u64, d: usize) -> (u64, u64) {
    let n = &x.datasets[d].name;
    (x.job_seed(rep, &format!("init/student_{n}")), x.job_seed(rep, &format!("train/student_{n}")))
}

/// Trained students, in plan order.
#[derive(Debug)]
pub struct StudentOut {
    pub datasets: Vec<usize>,
    pub students: Vec<Model>,
}

/// One distilled student per planned dataset.
pub fn run_stage3(x: &Experiment, rep: u64, tap: &str, teachers: &[Model], joint: Option<&JointOut>) -> Result<StudentOut> {
    let plan = x.plan();
    let students = x.par_map(&plan.students, |&d| {
        let data = &x.datasets[d];
        let (targets, owner) = extract_targets(x, rep, tap, teachers, joint, d)?;
        let name = format!("student_{}", data.name);
        let spec = student_spec(x, d, &name)?;
        let kd = x.cfg().kd_at(d, tap)?;
        let cfg = &x.cfg().train.student;
        let (init, seed) = student_seeds(x, rep, d);
        let mut h = Hasher::new();
        h.update(b"student").update(owner.fingerprint.as_bytes()).update(spec.hash().as_bytes()).update(x.data_hash(d).as_bytes());
        h.update(serde_json::to_string(&kd).expect("kd serializes").as_bytes()).update(train_json(cfg).as_bytes());
        h.update(&init.to_le_bytes()).update(&seed.to_le_bytes()).update(&[x.cfg().curves as u8]);
        job(
            x,
            &format!("rep{rep}/stage3/{tap}/{name}"),
            meta(rep, "mlfd", tap, &name),
            &h.finish(),
            &[data.name.clone()],
            load_model,
            |dir| {
                let run = train_student(&spec, data, &targets, &kd, cfg, init, seed, x.cfg().curves)?;
                run.student.save(&dir.path(CHECKPOINT))?;
                let fp = run.student.fingerprint();
                Ok(Trained { value: run.student, log: Some(run.log), fingerprint: fp, skipped: false })
            },
            |m, done| {
                let s = m.predict(&data.split_inputs(Split::Test)?)?;
                Ok(vec![test_record(&done.meta, data, &s, 0, done)])
            },
        )
    })?;
    Ok(StudentOut { datasets: plan.students, students })
}

/// A finished student checkpoint.
pub fn load_student(x: &Experiment, rep: u64, tap: &str, d: usize) -> Result<Model> {
    let dir = x.run.job(&format!("rep{rep}/stage3/{tap}/student_{}", x.datasets[d].name));
    if !dir.path("done").exists() {
        return Err(Error::Precondition(format!("no student for {} under {tap}, replicate {rep}; run distill first", x.datasets[d].name)));
    }
    Ok(load_model(&dir)?.0)
}
