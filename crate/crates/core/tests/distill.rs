mod common;

use mlfd_core::data::{LabeledDataset, Render, Split};
use mlfd_core::distill::{extract_distill_targets, kd_loss, train_student, DistillTargets, KDConfig};
use mlfd_core::fusion::{EmbeddingCache, Owner};
use mlfd_core::models::{tap_set_levels, Model, ModelSpec};
use mlfd_core::train::{Engine, Supervised};
use mlfd_core::Error;
use mlfd_numerics::gradcheck::{max_rel_error, numeric_grads, FD_REL_TOL, FD_STEP};
use mlfd_numerics::{cross_entropy, mse, rng, softmax_with_temperature, Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn randn(shape: &[usize], r: &mut rng::Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(r)).collect()).unwrap()
}

/// Teacher-side quantities of one random case.
struct Case {
    logits: Tensor,
    one_hot: Tensor,
    student: Vec<Tensor>,
    probs: Tensor,
    teacher: Vec<Tensor>,
}

fn case(seed: u64) -> Case {
    let mut r = rng::rng(seed);
    let (b, c) = (r.gen_range(2..=5), r.gen_range(3..=8));
    let shapes = [vec![b, r.gen_range(1..=3), 2, 2], vec![b, r.gen_range(2..=6)]];
    let mut one_hot = Tensor::zeros(&[b, c]);
    for i in 0..b {
        let y = r.gen_range(0..c);
        one_hot.data_mut()[i * c + y] = 1.0;
    }
    Case {
        logits: randn(&[b, c], &mut r),
        one_hot,
        student: shapes.iter().map(|s| randn(s, &mut r)).collect(),
        probs: softmax_with_temperature(&randn(&[b, c], &mut r), 1.0).unwrap(),
        teacher: shapes.iter().map(|s| randn(s, &mut r)).collect(),
    }
}

fn eval(c: &Case, logits: &Tensor, student: &[Tensor], cfg: &KDConfig) -> (f64, mlfd_core::distill::KdParts) {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let s: Vec<_> = student.iter().map(|e| tape.constant(e.clone())).collect();
    let (total, parts) = kd_loss(&mut tape, l, &c.one_hot, &s, &c.probs, &c.teacher, cfg).unwrap();
    (tape.value(total).item(), parts)
}

fn zero_weights() -> KDConfig {
    KDConfig { alpha: 0.0, betas: vec![0.0, 0.0], tau: 2.0 }
}

#[test]
fn zero_weights_reduce_to_hard_cross_entropy() {
    for seed in 0..20 {
        let c = case(seed);
        let (total, parts) = eval(&c, &c.logits, &c.student, &zero_weights());
        let hard = cross_entropy(&softmax_with_temperature(&c.logits, 1.0).unwrap(), &c.one_hot).unwrap();
        assert!((total - hard).abs() <= 1e-12, "seed {seed}: {total} vs {hard}");
        assert_eq!(total, parts.hard);
    }
}

#[test]
fn matching_embeddings_have_zero_regression_loss() {
    let c = case(3);
    let (_, parts) = eval(&c, &c.logits, &c.teacher, &KDConfig::default());
    assert_eq!(parts.mse, vec![0.0, 0.0]);
}

#[test]
fn default_total_is_the_weighted_sum_of_independent_components() {
    let cfg = KDConfig::default();
    for seed in 0..20 {
        let c = case(100 + seed);
        let (total, _) = eval(&c, &c.logits, &c.student, &cfg);
        let hard = cross_entropy(&softmax_with_temperature(&c.logits, 1.0).unwrap(), &c.one_hot).unwrap();
        // teacher probabilities come from some logits z; softmax(ln p / tau) == softmax(z / tau)
        let ln_p = Tensor::new(c.probs.shape().to_vec(), c.probs.data().iter().map(|p| p.ln()).collect()).unwrap();
        let soft = cross_entropy(&softmax_with_temperature(&c.logits, 2.0).unwrap(), &softmax_with_temperature(&ln_p, 2.0).unwrap()).unwrap();
        let m1 = mse(&c.student[0], &c.teacher[0]).unwrap();
        let m2 = mse(&c.student[1], &c.teacher[1]).unwrap();
        let expected = hard + 0.6 * 4.0 * soft + 0.2 * m1 + 0.2 * m2;
        assert!((total - expected).abs() <= 1e-12, "seed {seed}: {total} vs {expected}");
    }
}

#[test]
fn beta_count_mismatch_is_a_config_error() {
    let c = case(1);
    let mut tape = Tape::new();
    let l = tape.constant(c.logits.clone());
    let s: Vec<_> = c.student.iter().map(|e| tape.constant(e.clone())).collect();
    let cfg = KDConfig { betas: vec![0.2], ..KDConfig::default() };
    assert!(matches!(kd_loss(&mut tape, l, &c.one_hot, &s, &c.probs, &c.teacher, &cfg), Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn total_is_linear_in_each_beta(seed in 0u64..10_000, level in 0usize..2, beta in 0.0f64..2.0, delta in 0.0f64..2.0) {
        let c = case(seed);
        let mut cfg = KDConfig::default();
        cfg.betas[level] = beta;
        let (t0, parts) = eval(&c, &c.logits, &c.student, &cfg);
        cfg.betas[level] = beta + delta;
        let (t1, _) = eval(&c, &c.logits, &c.student, &cfg);
        prop_assert!((t1 - t0 - delta * parts.mse[level]).abs() <= 1e-12 * (1.0 + t1.abs()));
    }
}

#[test]
fn composite_gradient_matches_finite_differences() {
    let cfg = KDConfig::default();
    for seed in 0..20 {
        let c = case(500 + seed);
        let mut inputs = vec![c.logits.clone()];
        inputs.extend(c.student.iter().cloned());
        let mut tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone().with_grad())).collect();
        let (total, _) = kd_loss(&mut tape, vars[0], &c.one_hot, &vars[1..], &c.probs, &c.teacher, &cfg).unwrap();
        tape.backward(total).unwrap();
        let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v).unwrap().clone()).collect();
        let numeric = numeric_grads(&inputs, FD_STEP, |xs| Ok(eval(&c, &xs[0], &xs[1..], &cfg).0)).unwrap();
        let err = max_rel_error(&analytic, &numeric, 1e-5);
        assert!(err < FD_REL_TOL, "seed {seed}: {err:e}");
    }
}

/// A tiny image family, one trained joint teacher over it and the L2 levels.
struct Setup {
    data: Vec<LabeledDataset>,
    joint: mlfd_core::fusion::JointTeacher,
    embs: Vec<Vec<Tensor>>,
    levels: Vec<String>,
}

fn setup(seed: u64) -> Setup {
    let data = mlfd_core::data::gen_synthetic_family(&common::family(2, 3, 10, 0.3, Render::Image { side: 8 }, seed)).unwrap();
    let teachers = common::train_teachers(&data, 1, seed + 1);
    let levels = tap_set_levels("L2").unwrap();
    let mut joint = common::joint_for(&teachers, &data, &levels, seed + 2);
    let embs = common::teacher_embeddings(&teachers, &data, &levels[0]);
    let refs: Vec<_> = data.iter().collect();
    mlfd_core::fusion::train_joint_teacher(&mut joint, &refs, &embs, &common::train_cfg(1), seed + 3, false).unwrap();
    Setup { data, joint, embs, levels }
}

fn student(d: &LabeledDataset) -> ModelSpec {
    common::cnn("cnn-small", d.sample_shape(), d.classes, 2)
}

#[test]
fn targets_are_stochastic_counted_and_reproducible() {
    let s = setup(40);
    let t = extract_distill_targets(&s.joint, 1, &s.data[1], &s.embs[1], &s.levels).unwrap();
    let c = t.probs.shape()[1];
    assert_eq!(c, s.data[1].classes);
    for row in t.probs.data().chunks(c) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
    let n = s.data[1].splits.train.len();
    assert_eq!(t.samples, s.data[1].splits.train);

    let dir = tempfile::tempdir().unwrap();
    let cache = EmbeddingCache::open(dir.path());
    let owner = Owner { spec_hash: s.joint.spec.hash(), fingerprint: s.joint.fingerprint() };
    let entry = cache.entry("targets", owner).unwrap();
    t.save(&entry).unwrap();
    assert_eq!(entry.count_rows().unwrap(), n * (1 + s.levels.len()));

    let again = extract_distill_targets(&s.joint, 1, &s.data[1], &s.embs[1], &s.levels).unwrap();
    let loaded = DistillTargets::load(&entry, &s.data[1].name, &s.levels).unwrap();
    for other in [&again, &loaded] {
        assert!(other.probs.bit_eq(&t.probs));
        for l in &s.levels {
            assert!(other.embeddings[l].bit_eq(&t.embeddings[l]));
        }
    }
}

#[test]
fn zero_weight_distillation_retraces_the_plain_baseline() {
    let s = setup(50);
    let d = &s.data[0];
    let targets = extract_distill_targets(&s.joint, 0, d, &s.embs[0], &s.levels).unwrap();
    let spec = student(d);
    let cfg = common::train_cfg(3);
    let run = train_student(&spec, d, &targets, &zero_weights(), &cfg, 7, 8, true).unwrap();

    let mut base = Model::build(&spec, 7).unwrap();
    let log = Engine { tasks: vec![d], cfg: &cfg, seed: 8, track_test: true }.fit(&mut Supervised { model: &mut base, data: d }).unwrap();

    assert!(run.student.store.bit_eq(&base.store));
    assert_eq!(run.log.rows.len(), log.rows.len());
    for (a, b) in run.log.rows.iter().zip(&log.rows) {
        assert_eq!((a.epoch, a.task, a.split), (b.epoch, b.task, b.split));
        assert_eq!(a.acc, b.acc);
        let ce = |r: &mlfd_core::train::EpochRow| r.losses.iter().find(|(n, _)| n == "ce").map(|p| p.1);
        assert_eq!(ce(a), ce(b));
    }
    assert_eq!(run.student.count_params(false), base.count_params(false));
}

#[test]
fn default_distillation_trains_and_checkpoint_stands_alone() {
    let s = setup(60);
    let d = &s.data[1];
    let dir = tempfile::tempdir().unwrap();
    let (path, logits) = {
        let targets = extract_distill_targets(&s.joint, 1, d, &s.embs[1], &s.levels).unwrap();
        let run = train_student(&student(d), d, &targets, &KDConfig::default(), &common::train_cfg(2), 1, 2, false).unwrap();
        for row in &run.log.rows {
            assert!(row.losses.iter().all(|(_, v)| v.is_finite()));
        }
        assert!(run.log.rows.iter().any(|r| r.losses.iter().any(|(n, _)| n.starts_with("mse_"))));
        let path = dir.path().join("student");
        run.student.save(&path).unwrap();
        (path, run.student.predict(&d.inputs).unwrap())
    };
    // no teacher, target or adaptor is needed from here on
    drop(s.joint);
    let back = Model::load(&path, Some(&student(d))).unwrap();
    assert!(back.predict(&d.inputs).unwrap().bit_eq(&logits));
    assert_eq!(back.count_params(false), Model::build(&student(d), 0).unwrap().count_params(false));
}

#[test]
fn level_missing_from_the_student_is_a_config_error() {
    let s = setup(70);
    let d = &s.data[0];
    let targets = extract_distill_targets(&s.joint, 0, d, &s.embs[0], &s.levels).unwrap();
    let mut spec = student(d);
    spec.taps = mlfd_core::models::TapSet::new(vec![spec.taps.get("top").unwrap().clone()]).unwrap();
    let err = train_student(&spec, d, &targets, &KDConfig::default(), &common::train_cfg(1), 1, 2, false).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn regression_losses_fall_on_a_zero_noise_family() {
    let data = mlfd_core::data::gen_synthetic_family(&common::family(2, 3, 20, 0.0, Render::Image { side: 8 }, 80)).unwrap();
    let teachers = common::train_teachers(&data, 4, 81);
    let levels = tap_set_levels("L2").unwrap();
    let mut joint = common::joint_for(&teachers, &data, &levels, 82);
    let embs = common::teacher_embeddings(&teachers, &data, &levels[0]);
    let refs: Vec<_> = data.iter().collect();
    mlfd_core::fusion::train_joint_teacher(&mut joint, &refs, &embs, &common::train_cfg(5), 83, false).unwrap();
    let targets = extract_distill_targets(&joint, 0, &data[0], &embs[0], &levels).unwrap();
    let run = train_student(&student(&data[0]), &data[0], &targets, &KDConfig::default(), &common::train_cfg(5), 84, 85, false).unwrap();
    for l in &levels {
        let name = format!("mse_{l}");
        let per_epoch: Vec<f64> = run
            .log
            .rows
            .iter()
            .filter(|r| r.split == Split::Train)
            .filter_map(|r| r.losses.iter().find(|(n, _)| *n == name).map(|p| p.1))
            .collect();
        assert_eq!(per_epoch.len(), 5);
        assert!(per_epoch.windows(2).all(|w| w[1] <= w[0]), "{name}: {per_epoch:?}");
    }
}
