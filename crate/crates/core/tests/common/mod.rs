#![allow(dead_code)]

use mlfd_core::data::{gen_synthetic_family, LabeledDataset, Render, SyntheticFamilySpec};
use mlfd_core::models::{architecture, ArchOptions, ModelSpec};
use mlfd_core::train::TrainConfig;

pub fn family(m: usize, classes: usize, per_class: usize, noise: f64, render: Render, seed: u64) -> SyntheticFamilySpec {
    SyntheticFamilySpec {
        m,
        latent_dim: 8,
        classes: vec![classes; m],
        samples_per_class: per_class,
        train_size: None,
        test_size: 4 * classes,
        val_fraction: 0.2,
        style_scale: 0.5,
        noise_sigma: noise,
        pixel_noise: 0.0,
        render,
        prototype_pool: None,
        names: None,
        seed,
    }
}

/// Small image family: `m` datasets of 3 classes, 8x8 images.
pub fn images(m: usize, seed: u64) -> Vec<LabeledDataset> {
    gen_synthetic_family(&family(m, 3, 10, 0.3, Render::Image { side: 8 }, seed)).unwrap()
}

pub fn cnn(arch: &str, input: &[usize], classes: usize, w: usize) -> ModelSpec {
    let opts = ArchOptions { widths: Some([w, w + 1, w + 2]), hidden: Some(2 * w), dropout: 0.0 };
    architecture(arch).unwrap().spec(input, classes, &opts).unwrap()
}

pub fn train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        optimizer: "adamw".into(),
        learning_rate: 0.01,
        weight_decay: 1e-4,
        batch_size: 8,
        accumulation: 1,
        max_epochs: epochs,
        min_epochs: epochs,
        patience: 1,
    }
}

/// One teacher per dataset, trained briefly with the supervised engine.
pub fn train_teachers(data: &[LabeledDataset], epochs: usize, seed: u64) -> Vec<mlfd_core::models::Model> {
    use mlfd_core::models::Model;
    use mlfd_core::train::{Engine, Supervised};
    let arches = ["cnn-small", "cnn-se", "cnn-small"];
    data.iter()
        .enumerate()
        .map(|(k, d)| {
            let spec = cnn(arches[k % 3], d.sample_shape(), d.classes, 3 + k);
            let mut m = Model::build(&spec, seed + k as u64).unwrap();
            let cfg = train_cfg(epochs);
            Engine { tasks: vec![d], cfg: &cfg, seed: seed + 10 + k as u64, track_test: false }.fit(&mut Supervised { model: &mut m, data: d }).unwrap();
            m
        })
        .collect()
}

/// Every teacher's `level` embeddings of every sample, per dataset.
pub fn teacher_embeddings(teachers: &[mlfd_core::models::Model], data: &[LabeledDataset], level: &str) -> Vec<Vec<mlfd_numerics::Tensor>> {
    data.iter()
        .map(|d| teachers.iter().map(|t| t.infer(&d.inputs, &[level.to_string()]).unwrap().1.remove(level).unwrap()).collect())
        .collect()
}

/// Joint teacher over `teachers` fused at the first of `levels`.
pub fn joint_for(teachers: &[mlfd_core::models::Model], data: &[LabeledDataset], levels: &[String], seed: u64) -> mlfd_core::fusion::JointTeacher {
    use mlfd_core::fusion::{plan_joint, teacher_owner, FusionConfig, JointTeacher, TeacherRef};
    let refs = teachers
        .iter()
        .map(|t| {
            let o = teacher_owner(t);
            TeacherRef { spec_hash: o.spec_hash, fingerprint: o.fingerprint, shape: t.level_shape(&levels[0]).unwrap().to_vec() }
        })
        .collect();
    let shapes: Vec<Vec<Vec<usize>>> = levels.iter().map(|l| teachers.iter().map(|t| t.level_shape(l).unwrap().to_vec()).collect()).collect();
    let ds: Vec<(String, usize)> = data.iter().map(|d| (d.name.clone(), d.classes)).collect();
    JointTeacher::build(plan_joint(levels, &shapes, refs, &ds, &FusionConfig::default()).unwrap(), seed).unwrap()
}

pub fn copy_model(m: &mlfd_core::models::Model) -> mlfd_core::models::Model {
    let mut c = mlfd_core::models::Model::build(&m.spec, 0).unwrap();
    c.store = m.store.clone();
    c
}
