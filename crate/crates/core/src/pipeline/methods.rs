//! Training methods compared in the report, looked up by name.

use super::baselines::{merge_union, MultiHeadNet, MultiHeadObjective, MultiHeadSpec};
use super::run::{JobMeta, Record};
use super::stages::{job, run_stage1, run_stage2, run_stage3, student_seeds, student_spec, Trained, CHECKPOINT};
use super::Experiment;
use crate::data::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::train::{accuracy, Engine, Supervised};
use crate::util::Hasher;

pub trait TrainingMethod: Sync {
    fn name(&self) -> &'static str;
    fn describe(&self) -> &'static str;
    /// Trains (or reuses) everything the method needs for replicate `rep`
    /// and returns its test records.
    fn run(&self, x: &Experiment, rep: u64, tap: &str) -> Result<Vec<Record>>;
}

struct DatasetSpecific;
struct MultiHead;
struct JointHead;
struct Mlfd;

static REGISTRY: &[&dyn TrainingMethod] = &[&DatasetSpecific, &MultiHead, &JointHead, &Mlfd];

pub fn method_names() -> impl Iterator<Item = &'static str> {
    REGISTRY.iter().map(|m| m.name())
}

pub fn method(name: &str) -> Result<&'static dyn TrainingMethod> {
    REGISTRY
        .iter()
        .copied()
        .find(|m| m.name() == name)
        .ok_or_else(|| Error::Config(format!("unknown method '{name}' (known: {})", method_names().collect::<Vec<_>>().join(", "))))
}

fn base_hash(x: &Experiment, kind: &str, spec_hash: &str, datasets: &[usize], seeds: (u64, u64)) -> String {
    let mut h = Hasher::new();
    h.update(kind.as_bytes()).update(spec_hash.as_bytes());
    h.update(serde_json::to_string(&x.cfg().train.student).expect("train config serializes").as_bytes());
    h.update(&seeds.0.to_le_bytes()).update(&seeds.1.to_le_bytes()).update(&[x.cfg().curves as u8]);
    for &d in datasets {
        h.update(x.data_hash(d).as_bytes());
    }
    h.finish()
}

fn meta(rep: u64, method: &str, model: &str) -> JobMeta {
    JobMeta { replicate: rep, method: method.into(), tap_set: "-".into(), model: model.into() }
}

fn test_acc(meta: &JobMeta, d: &LabeledDataset, scores: &mlfd_numerics::Tensor, offset: usize, done: &super::Done) -> Record {
    Record::new(meta, &d.name, Split::Test, accuracy(scores, &d.split_labels(Split::Test), offset), done)
}

fn records_of(x: &Experiment, rels: &[String]) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for r in rels {
        out.extend(x.run.job(r).records()?);
    }
    Ok(out)
}

impl TrainingMethod for DatasetSpecific {
    fn name(&self) -> &'static str {
        "dataset-specific"
    }
    fn describe(&self) -> &'static str {
        "one student-sized network per dataset, hard labels only"
    }
    fn run(&self, x: &Experiment, rep: u64, _: &str) -> Result<Vec<Record>> {
        let plan = x.plan();
        let rels: Vec<String> = plan.students.iter().map(|&d| format!("rep{rep}/baselines/dataset-specific_{}", x.datasets[d].name)).collect();
        let items: Vec<(usize, &String)> = plan.students.iter().copied().zip(&rels).collect();
        x.par_map(&items, |&(d, rel)| {
            let data = &x.datasets[d];
            let name = format!("dataset-specific_{}", data.name);
            let spec = student_spec(x, d, &name)?;
            let (init, seed) = student_seeds(x, rep, d);
            let cfg = &x.cfg().train.student;
            job(
                x,
                rel,
                meta(rep, self.name(), &name),
                &base_hash(x, self.name(), &spec.hash(), &[d], (init, seed)),
                &[data.name.clone()],
                |dir| {
                    let m = Model::load(&dir.path(CHECKPOINT), Some(&spec))?;
                    let fp = m.fingerprint();
                    Ok((m, fp))
                },
                |dir| {
                    let mut m = Model::build(&spec, init)?;
                    let log = Engine { tasks: vec![data], cfg, seed, track_test: x.cfg().curves }.fit(&mut Supervised { model: &mut m, data })?;
                    m.save(&dir.path(CHECKPOINT))?;
                    let fp = m.fingerprint();
                    Ok(Trained { value: m, log: Some(log), fingerprint: fp, skipped: false })
                },
                |m, done| Ok(vec![test_acc(&done.meta, data, &m.predict(&data.split_inputs(Split::Test)?)?, 0, done)]),
            )
            .map(drop)
        })?;
        records_of(x, &rels)
    }
}

/// Trunk layers of the student for the first planned dataset.
fn shared_trunk(x: &Experiment, datasets: &[usize], name: &str) -> Result<(Vec<usize>, Vec<crate::models::LayerDesc>)> {
    let d0 = *datasets.first().ok_or_else(|| Error::Precondition("no datasets to train on".into()))?;
    let spec = student_spec(x, d0, name)?;
    Ok((spec.input, spec.layers))
}

impl TrainingMethod for MultiHead {
    fn name(&self) -> &'static str {
        "multi-head"
    }
    fn describe(&self) -> &'static str {
        "one shared student-sized trunk with a head per dataset, trained jointly"
    }
    fn run(&self, x: &Experiment, rep: u64, _: &str) -> Result<Vec<Record>> {
        let plan = x.plan();
        let data: Vec<&LabeledDataset> = plan.students.iter().map(|&d| &x.datasets[d]).collect();
        let (input, trunk) = shared_trunk(x, &plan.students, "multi-head")?;
        let spec = MultiHeadSpec { name: "multi-head".into(), input, trunk, heads: data.iter().map(|d| (d.name.clone(), d.classes)).collect() };
        let seeds = (x.job_seed(rep, "init/multi_head"), x.job_seed(rep, "train/multi_head"));
        let rel = format!("rep{rep}/baselines/multi-head");
        let cfg = &x.cfg().train.student;
        job(
            x,
            &rel,
            meta(rep, self.name(), "multi-head"),
            &base_hash(x, self.name(), &spec.hash(), &plan.students, seeds),
            &data.iter().map(|d| d.name.clone()).collect::<Vec<_>>(),
            |dir| {
                let n = MultiHeadNet::load(&dir.path(CHECKPOINT))?;
                let fp = n.fingerprint();
                Ok((n, fp))
            },
            |dir| {
                let mut net = MultiHeadNet::build(&spec, seeds.0)?;
                let log = Engine { tasks: data.clone(), cfg, seed: seeds.1, track_test: x.cfg().curves }
                    .fit(&mut MultiHeadObjective { net: &mut net, datasets: &data })?;
                net.save(&dir.path(CHECKPOINT))?;
                let fp = net.fingerprint();
                Ok(Trained { value: net, log: Some(log), fingerprint: fp, skipped: false })
            },
            |net, done| {
                data.iter()
                    .enumerate()
                    .map(|(t, d)| Ok(test_acc(&done.meta, d, &net.predict(&d.split_inputs(Split::Test)?, t)?, 0, done)))
                    .collect()
            },
        )?;
        records_of(x, &[rel])
    }
}

impl TrainingMethod for JointHead {
    fn name(&self) -> &'static str {
        "joint-head"
    }
    fn describe(&self) -> &'static str {
        "one student-sized network over the union of all label spaces"
    }
    fn run(&self, x: &Experiment, rep: u64, _: &str) -> Result<Vec<Record>> {
        let plan = x.plan();
        let data: Vec<&LabeledDataset> = plan.students.iter().map(|&d| &x.datasets[d]).collect();
        let (union, offsets) = merge_union("union", &data)?;
        let d0 = plan.students[0];
        let spec = x.cfg().student_choice(d0).spec("joint-head", union.sample_shape(), union.classes)?;
        let seeds = (x.job_seed(rep, "init/joint_head"), x.job_seed(rep, "train/joint_head"));
        let rel = format!("rep{rep}/baselines/joint-head");
        let cfg = &x.cfg().train.student;
        job(
            x,
            &rel,
            meta(rep, self.name(), "joint-head"),
            &base_hash(x, self.name(), &spec.hash(), &plan.students, seeds),
            &[union.name.clone()],
            |dir| {
                let m = Model::load(&dir.path(CHECKPOINT), Some(&spec))?;
                let fp = m.fingerprint();
                Ok((m, fp))
            },
            |dir| {
                let mut m = Model::build(&spec, seeds.0)?;
                let log = Engine { tasks: vec![&union], cfg, seed: seeds.1, track_test: x.cfg().curves }
                    .fit(&mut Supervised { model: &mut m, data: &union })?;
                m.save(&dir.path(CHECKPOINT))?;
                let fp = m.fingerprint();
                Ok(Trained { value: m, log: Some(log), fingerprint: fp, skipped: false })
            },
            |m, done| {
                // argmax over the whole union: confusing another dataset's class counts as an error
                data.iter()
                    .zip(&offsets)
                    .map(|(d, &off)| Ok(test_acc(&done.meta, d, &m.predict(&d.split_inputs(Split::Test)?)?, off, done)))
                    .collect()
            },
        )?;
        records_of(x, &[rel])
    }
}

impl TrainingMethod for Mlfd {
    fn name(&self) -> &'static str {
        "mlfd"
    }
    fn describe(&self) -> &'static str {
        "individual teachers, a fused joint teacher, then students distilled at several levels"
    }
    fn run(&self, x: &Experiment, rep: u64, tap: &str) -> Result<Vec<Record>> {
        let teachers = run_stage1(x, rep)?;
        let joint = if x.plan().fused() { Some(run_stage2(x, rep, tap, &teachers, true)?) } else { None };
        let out = run_stage3(x, rep, tap, &teachers, joint.as_ref())?;
        let rels: Vec<String> = out.datasets.iter().map(|&d| format!("rep{rep}/stage3/{tap}/student_{}", x.datasets[d].name)).collect();
        records_of(x, &rels)
    }
}
