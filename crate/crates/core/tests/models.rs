mod common;

use mlfd_core::models::{tap_set_levels, LayerDesc, Model, ModelSpec, Tap, TapSet, LEVELS};
use mlfd_core::Error;
use mlfd_numerics::Tensor;

fn mlp(input: usize, hidden: &[usize], classes: usize) -> ModelSpec {
    let mut layers = Vec::new();
    for &h in hidden {
        layers.push(LayerDesc::dense(h));
        layers.push(LayerDesc::Relu);
    }
    let taps = TapSet::new(vec![Tap::new("top", layers.len())]).unwrap();
    ModelSpec { name: "mlp".into(), input: vec![input], layers, head: classes, taps }
}

fn inputs(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| ((i as u64 * 2654435761 + seed * 97) % 1000) as f64 / 500.0 - 1.0).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn same_seed_same_parameters() {
    let spec = common::cnn("cnn-se", &[1, 8, 8], 3, 4);
    let (a, b) = (Model::build(&spec, 9).unwrap(), Model::build(&spec, 9).unwrap());
    assert!(a.store.bit_eq(&b.store));
    assert!(!a.store.bit_eq(&Model::build(&spec, 10).unwrap().store));
}

#[test]
fn dense_weights_have_xavier_variance() {
    let spec = mlp(8, &[], 4);
    let mut w = Vec::new();
    for seed in 0..600 {
        let m = Model::build(&spec, seed).unwrap();
        w.extend_from_slice(m.store.params[0].value.data());
    }
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let target = 2.0 / 12.0;
    assert!((var / target - 1.0).abs() < 0.05, "variance {var} vs {target}");
}

#[test]
fn tap_past_the_last_layer_is_a_spec_error() {
    let mut spec = mlp(4, &[3], 2);
    spec.taps = TapSet::new(vec![Tap::new("top", 5)]).unwrap();
    assert!(matches!(Model::build(&spec, 0), Err(Error::Spec(_))));
}

#[test]
fn taps_must_deepen() {
    assert!(TapSet::new(vec![Tap::new("a", 2), Tap::new("b", 2)]).is_err());
    assert!(TapSet::new(vec![Tap::new("a", 2), Tap::new("b", 1)]).is_err());
    assert!(TapSet::new(vec![]).is_err());
}

#[test]
fn empty_level_query_is_plain_forward() {
    let m = Model::build(&common::cnn("cnn-small", &[1, 8, 8], 3, 3), 1).unwrap();
    let x = inputs(&[5, 1, 8, 8], 1);
    let (logits, taps) = m.infer(&x, &[]).unwrap();
    assert!(taps.is_empty());
    assert!(logits.bit_eq(&m.predict(&x).unwrap()));
}

#[test]
fn pre_head_tap_matches_layer_by_layer_recomputation() {
    let m = Model::build(&mlp(3, &[4, 5], 2), 4).unwrap();
    let x = inputs(&[6, 3], 2);
    let (_, taps) = m.infer(&x, &["top".into()]).unwrap();
    let p = &m.store.params;
    let mut h: Vec<Vec<f64>> = (0..6).map(|r| x.data()[r * 3..r * 3 + 3].to_vec()).collect();
    for layer in 0..2 {
        let (w, b) = (&p[2 * layer].value, &p[2 * layer + 1].value);
        let (din, dout) = (w.shape()[0], w.shape()[1]);
        h = h
            .iter()
            .map(|row| (0..dout).map(|j| ((0..din).map(|i| row[i] * w.data()[i * dout + j]).sum::<f64>() + b.data()[j]).max(0.0)).collect())
            .collect();
    }
    let got = &taps["top"];
    assert_eq!(got.shape(), &[6, 5]);
    for (r, row) in h.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            assert!((got.data()[r * 5 + j] - v).abs() < 1e-12);
        }
    }
}

#[test]
fn every_level_has_the_batch_extent_and_is_a_pure_observation() {
    let m = Model::build(&common::cnn("cnn-se", &[1, 8, 8], 3, 3), 2).unwrap();
    let x = inputs(&[7, 1, 8, 8], 3);
    let all: Vec<String> = LEVELS.iter().map(|s| s.to_string()).collect();
    let (full_logits, full) = m.infer(&x, &all).unwrap();
    for l in &all {
        assert_eq!(full[l].shape()[0], 7);
    }
    let sub = tap_set_levels("L2").unwrap();
    let (logits, taps) = m.infer(&x, &sub).unwrap();
    assert!(logits.bit_eq(&full_logits));
    for l in &sub {
        assert!(taps[l].bit_eq(&full[l]));
    }
}

#[test]
fn eval_forward_is_deterministic_even_with_dropout() {
    let mut spec = common::cnn("cnn-small", &[1, 8, 8], 3, 3);
    spec.layers.push(LayerDesc::Dropout { p: 0.5 });
    let m = Model::build(&spec, 3).unwrap();
    let x = inputs(&[4, 1, 8, 8], 4);
    assert!(m.predict(&x).unwrap().bit_eq(&m.predict(&x).unwrap()));
}

#[test]
fn parameter_counts() {
    assert_eq!(Model::build(&mlp(8, &[], 4), 0).unwrap().count_params(false), 36);
    let conv = ModelSpec {
        name: "conv".into(),
        input: vec![1, 4, 4],
        layers: vec![LayerDesc::conv(4, 3, 1), LayerDesc::Flatten],
        head: 1,
        taps: TapSet::new(vec![Tap::new("top", 1)]).unwrap(),
    };
    // conv 1->4 3x3 with bias, then a 64->1 dense head
    assert_eq!(Model::build(&conv, 0).unwrap().count_params(false), 40 + 65);
    let mut m = Model::build(&mlp(8, &[5], 4), 0).unwrap();
    m.freeze();
    assert_eq!(m.count_params(true), 0);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let spec = common::cnn("cnn-se", &[1, 8, 8], 3, 3);
    let m = Model::build(&spec, 5).unwrap();
    m.save(&dir.path().join("ck")).unwrap();
    let back = Model::load(&dir.path().join("ck"), Some(&spec)).unwrap();
    assert_eq!(back.spec_hash(), m.spec_hash());
    assert_eq!(back.fingerprint(), m.fingerprint());
    assert!(back.store.bit_eq(&m.store));
    let other = common::cnn("cnn-small", &[1, 8, 8], 3, 3);
    assert!(Model::load(&dir.path().join("ck"), Some(&other)).is_err());
}

#[test]
fn layer_lists_round_trip_through_toml() {
    #[derive(serde::Serialize, serde::Deserialize)]
    struct W {
        layers: Vec<LayerDesc>,
    }
    let layers = vec![LayerDesc::conv(4, 3, 1), LayerDesc::BatchNorm, LayerDesc::Dropout { p: 0.5 }, LayerDesc::SqueezeExcite { reduction: 2 }];
    let text = toml::to_string(&W { layers: layers.clone() }).unwrap();
    assert_eq!(toml::from_str::<W>(&text).unwrap().layers, layers);
}
