mod common;

use std::fs;

use mlfd_core::data::{Render, Split};
use mlfd_core::fusion::{
    cache_key, fuse_embeddings, precompute_teacher_embeddings, teacher_owner, train_joint_teacher, EmbeddingCache, JointSpec, JointTeacher, TeacherRef,
};
use mlfd_core::models::{tap_set_levels, Ctx, LayerDesc, ParamStore, Sequential};
use mlfd_core::train::accuracy;
use mlfd_core::Error;
use mlfd_numerics::{Mode, Tape, Tensor};

fn ramp(shape: &[usize], offset: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|i| offset + i as f64 * 0.01).collect()).unwrap()
}

#[test]
fn fused_channels_are_the_adaptor_blocks_in_teacher_order() {
    let mut store = ParamStore::new();
    let id = |shape: &[usize], store: &mut ParamStore| Sequential::new(&[], shape, store, "id.", 0).unwrap();
    let (a, b) = (id(&[4, 3, 3], &mut store), id(&[6, 3, 3], &mut store));
    let (a2, b2) = (id(&[4, 3, 3], &mut store), id(&[6, 3, 3], &mut store));
    let (ea, eb) = (ramp(&[2, 4, 3, 3], 0.0), ramp(&[2, 6, 3, 3], 5.0));
    let mut tape = Tape::new();
    let mut cx = Ctx::new(&mut tape, Mode::Eval, 0, 0);
    let (va, vb) = (cx.tape.constant(ea.clone()), cx.tape.constant(eb.clone()));
    let ab = fuse_embeddings(&mut cx, &[a, b], &store, 0, &[Some(va), Some(vb)]).unwrap();
    let ba = fuse_embeddings(&mut cx, &[b2, a2], &store, 0, &[Some(vb), Some(va)]).unwrap();
    let (ab, ba) = (tape.value(ab).clone(), tape.value(ba).clone());
    assert_eq!(ab.shape(), &[2, 10, 3, 3]);
    assert!(ab.slice_channels(0, 4).unwrap().bit_eq(&ea));
    assert!(ab.slice_channels(4, 10).unwrap().bit_eq(&eb));
    assert!(ba.slice_channels(0, 6).unwrap().bit_eq(&eb));
    assert!(ba.slice_channels(6, 10).unwrap().bit_eq(&ea));
}

#[test]
fn trained_adaptor_widths_add_up() {
    let mut store = ParamStore::new();
    let a = Sequential::new(&[LayerDesc::Conv { out_channels: 4, kernel: 1, stride: 1, padding: 0, bias: true }], &[3, 2, 2], &mut store, "a.", 1).unwrap();
    let b = Sequential::new(&[LayerDesc::Conv { out_channels: 6, kernel: 1, stride: 1, padding: 0, bias: true }], &[5, 2, 2], &mut store, "b.", 1).unwrap();
    let mut tape = Tape::new();
    let mut cx = Ctx::new(&mut tape, Mode::Eval, 0, 0);
    let (va, vb) = (cx.tape.constant(ramp(&[3, 3, 2, 2], 0.0)), cx.tape.constant(ramp(&[3, 5, 2, 2], 1.0)));
    let adaptors = [a, b];
    let f = fuse_embeddings(&mut cx, &adaptors, &store, 0, &[Some(va), Some(vb)]).unwrap();
    assert_eq!(cx.tape.value(f).shape(), &[3, 10, 2, 2]);
    let err = fuse_embeddings(&mut cx, &adaptors, &store, 0, &[Some(va), None]).unwrap_err();
    assert!(matches!(err, Error::IncompleteInput(_)));
}

#[test]
fn single_identity_teacher_passes_its_embedding_through() {
    let spec = JointSpec {
        levels: vec!["top".into()],
        teachers: vec![TeacherRef { spec_hash: "s".into(), fingerprint: "f".into(), shape: vec![5] }],
        adaptors: vec![vec![]],
        blocks: vec![vec![]],
        datasets: vec!["d".into()],
        heads: vec![vec![LayerDesc::dense(3)]],
    };
    let jt = JointTeacher::build(spec, 0).unwrap();
    let e = ramp(&[4, 5], -0.3);
    let (logits, taps) = jt.infer_cached(&[e.clone()], 0, &["top".into()]).unwrap();
    assert!(taps["top"].bit_eq(&e));
    assert_eq!(logits.shape(), &[4, 3]);
}

#[test]
fn cached_and_raw_paths_agree_bitwise() {
    let data = common::images(3, 2);
    let teachers = common::train_teachers(&data, 1, 3);
    let levels = tap_set_levels("L2").unwrap();
    let mut jt = common::joint_for(&teachers, &data, &levels, 4);
    let embs = common::teacher_embeddings(&teachers, &data, &levels[0]);
    jt.attach_backbones(teachers.iter().map(common::copy_model).collect()).unwrap();
    for (d, ds) in data.iter().enumerate() {
        let (lc, tc) = jt.infer_cached(&embs[d], d, &levels).unwrap();
        let (lr, tr) = jt.infer_raw(&ds.inputs, d, &levels).unwrap();
        assert!(lc.bit_eq(&lr));
        assert_eq!(lc.shape(), &[ds.len(), ds.classes]);
        for l in &levels {
            assert!(tc[l].bit_eq(&tr[l]));
        }
    }
    assert!(matches!(jt.infer_cached(&embs[0], 3, &[]), Err(Error::HeadRouting(3))));
}

#[test]
fn joint_training_leaves_teachers_bitwise_unchanged() {
    let data = common::images(2, 5);
    let teachers = common::train_teachers(&data, 1, 6);
    let before: Vec<_> = teachers.iter().map(|t| t.store.clone()).collect();
    let levels = tap_set_levels("L2").unwrap();
    let mut jt = common::joint_for(&teachers, &data, &levels, 7);
    let init = jt.store.clone();
    let embs = common::teacher_embeddings(&teachers, &data, &levels[0]);
    let refs: Vec<_> = data.iter().collect();
    let log = train_joint_teacher(&mut jt, &refs, &embs, &common::train_cfg(3), 8, true).unwrap();
    assert!(!jt.store.bit_eq(&init), "joint parameters should move");
    for (t, b) in teachers.iter().zip(&before) {
        assert!(t.store.bit_eq(b));
    }
    // the spec still names these exact teachers
    jt.attach_backbones(teachers.iter().map(common::copy_model).collect()).unwrap();
    assert_eq!(jt.count_params(true), jt.store.count(true));
    for row in log.rows.iter().filter_map(|r| r.acc.as_ref()) {
        assert!(row.acc1 <= row.acc5 && row.acc5 <= 100.0);
    }
    let evaluated = log.rows.iter().filter(|r| r.acc.is_some() && r.split == Split::Test).map(|r| r.task).collect::<std::collections::BTreeSet<_>>();
    assert_eq!(evaluated.len(), 2, "every dataset is evaluated each epoch");
}

#[test]
fn joint_teacher_fits_a_zero_noise_family() {
    let data = mlfd_core::data::gen_synthetic_family(&common::family(2, 3, 20, 0.0, Render::Image { side: 8 }, 11)).unwrap();
    let teachers = common::train_teachers(&data, 8, 12);
    let levels = tap_set_levels("L2").unwrap();
    let mut jt = common::joint_for(&teachers, &data, &levels, 13);
    let embs = common::teacher_embeddings(&teachers, &data, &levels[0]);
    let refs: Vec<_> = data.iter().collect();
    train_joint_teacher(&mut jt, &refs, &embs, &common::train_cfg(30), 14, false).unwrap();
    for (d, ds) in data.iter().enumerate() {
        let idx = ds.splits.get(Split::Train);
        let e: Vec<_> = embs[d].iter().map(|t| t.select_rows(idx).unwrap()).collect();
        let (logits, _) = jt.infer_cached(&e, d, &[]).unwrap();
        assert_eq!(accuracy(&logits, &ds.split_labels(Split::Train), 0).acc1, 100.0, "{}", ds.name);
    }
}

struct CacheSetup {
    _dir: tempfile::TempDir,
    cache: EmbeddingCache,
    data: Vec<mlfd_core::data::LabeledDataset>,
    teachers: Vec<mlfd_core::models::Model>,
}

fn cache_setup() -> CacheSetup {
    let mut spec = common::family(3, 4, 20, 0.3, Render::Image { side: 8 }, 21);
    spec.test_size = 20;
    let data = mlfd_core::data::gen_synthetic_family(&spec).unwrap();
    assert_eq!(data[0].len(), 100);
    let teachers = common::train_teachers(&data, 1, 22);
    let dir = tempfile::tempdir().unwrap();
    CacheSetup { cache: EmbeddingCache::open(dir.path()), _dir: dir, data, teachers }
}

fn key(i: usize) -> String {
    cache_key("spec", &format!("teacher_{i}"))
}

#[test]
fn cache_counts_round_trips_and_matches_fresh_forward() {
    let s = cache_setup();
    let level = "stage3";
    let mut rows = 0;
    for (i, t) in s.teachers.iter().enumerate() {
        let entry = s.cache.entry(&key(i), teacher_owner(t)).unwrap();
        precompute_teacher_embeddings(&entry, t, &[&s.data[0]], level).unwrap();
        rows += entry.count_rows().unwrap();
        let fresh = t.infer(&s.data[0].inputs, &[level.into()]).unwrap().1.remove(level).unwrap();
        assert!(entry.read_all(&s.data[0].name, level, 100).unwrap().bit_eq(&fresh));
        for split in Split::ALL {
            let (samples, values) = entry.read(&s.data[0].name, split, level).unwrap();
            assert_eq!(samples, s.data[0].splits.get(split));
            assert!(values.bit_eq(&fresh.select_rows(&samples).unwrap()));
        }
    }
    assert_eq!(rows, 300);
}

fn snapshot(dir: &std::path::Path) -> Vec<(std::path::PathBuf, std::time::SystemTime, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.clone(), fs::metadata(&p).unwrap().modified().unwrap(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn rerun_over_a_valid_cache_writes_nothing() {
    let s = cache_setup();
    let t = &s.teachers[0];
    let refs: Vec<_> = s.data.iter().collect();
    let entry = s.cache.entry(&key(0), teacher_owner(t)).unwrap();
    assert_eq!(precompute_teacher_embeddings(&entry, t, &refs, "top").unwrap(), 300);
    let before = snapshot(s.cache.root());
    let entry = s.cache.entry(&key(0), teacher_owner(t)).unwrap();
    assert_eq!(precompute_teacher_embeddings(&entry, t, &refs, "top").unwrap(), 0);
    assert_eq!(snapshot(s.cache.root()), before);
}

#[test]
fn changed_teacher_is_refused_as_stale() {
    let s = cache_setup();
    let entry = s.cache.entry(&key(0), teacher_owner(&s.teachers[0])).unwrap();
    precompute_teacher_embeddings(&entry, &s.teachers[0], &[&s.data[0]], "top").unwrap();
    let mut retrained = common::copy_model(&s.teachers[0]);
    retrained.store.params[0].value.data_mut()[0] += 1e-9;
    let err = s.cache.entry(&key(0), teacher_owner(&retrained)).unwrap_err();
    assert!(matches!(err, Error::StaleCache(_)), "{err}");
    s.cache.invalidate(&key(0)).unwrap();
    assert!(s.cache.entry(&key(0), teacher_owner(&retrained)).is_ok());
}

#[test]
fn corrupted_shard_is_detected() {
    let s = cache_setup();
    let entry = s.cache.entry(&key(0), teacher_owner(&s.teachers[0])).unwrap();
    precompute_teacher_embeddings(&entry, &s.teachers[0], &[&s.data[0]], "top").unwrap();
    let shard = entry.dir().join(&s.data[0].name).join("train").join("top").join("shard_0.tnsr");
    let mut bytes = fs::read(&shard).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&shard, bytes).unwrap();
    assert!(matches!(entry.read(&s.data[0].name, Split::Train, "top"), Err(Error::Corruption(_))));
}
