//! Analytic gradients of every differentiable primitive against central
//! finite differences, over random shapes and seeds.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{max_rel_error, numeric_grads, FD_STEP};
use crate::error::Result;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;
use crate::rng;

const FLOOR: f64 = 1e-5;

/// Worst case of one primitive over every checked seed.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveCheck {
    pub primitive: &'static str,
    pub cases: usize,
    /// Largest relative error seen; infinite if a case failed to evaluate.
    pub max_rel_error: f64,
    pub worst_seed: u64,
    pub failure: Option<String>,
}

#[derive(Default)]
struct Suite {
    results: BTreeMap<&'static str, PrimitiveCheck>,
}

impl Suite {
    /// Checks `build` (inputs -> output tensor var) against finite differences.
    /// Only inputs flagged in `differentiable` are perturbed and compared.
    fn check<F>(&mut self, name: &'static str, inputs: Vec<Tensor>, differentiable: &[bool], seed: u64, build: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let outcome = Self::run(&inputs, differentiable, seed, build);
        let e = self.results.entry(name).or_insert(PrimitiveCheck { primitive: name, cases: 0, max_rel_error: 0.0, worst_seed: seed, failure: None });
        e.cases += 1;
        let err = match outcome {
            Ok(v) => v,
            Err(x) => {
                e.failure.get_or_insert_with(|| format!("seed {seed}: {x}"));
                f64::INFINITY
            }
        };
        if err > e.max_rel_error || err.is_nan() {
            e.max_rel_error = err;
            e.worst_seed = seed;
        }
    }

    fn run<F>(inputs: &[Tensor], differentiable: &[bool], seed: u64, build: F) -> Result<f64>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {

        let out_shape = {
            let mut t = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
            let o = build(&mut t, &vars)?;
            t.value(o).shape().to_vec()
        };
        let mut r = rng::rng(seed ^ 0xABCD);
        let weights = randn(&out_shape, &mut r);
        let scalar_out = out_shape.iter().product::<usize>() == 1;

        let eval = |xs: &[Tensor], tape: &mut Tape| -> Result<(Var, Vec<Var>)> {
            let vars: Vec<Var> = xs
                .iter()
                .zip(differentiable)
                .map(|(x, &d)| if d { tape.leaf(x.clone().with_grad()) } else { tape.constant(x.clone()) })
                .collect();
            let o = build(tape, &vars)?;
            let loss = if scalar_out { o } else { project(tape, o, &weights)? };
            Ok((loss, vars))
        };

        let mut tape = Tape::new();
        let (loss, vars) = eval(&inputs, &mut tape)?;
        tape.backward(loss)?;
        let analytic: Vec<Tensor> = (0..inputs.len())
            .filter(|&i| differentiable[i])
            .map(|i| tape.grad(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape())))
            .collect();

        let free: Vec<Tensor> = inputs.iter().zip(differentiable).filter(|(_, &d)| d).map(|(x, _)| x.clone()).collect();
        let numeric = numeric_grads(&free, FD_STEP, |xs| {
            let mut it = xs.iter();
            let full: Vec<Tensor> = inputs
                .iter()
                .zip(differentiable)
                .map(|(x, &d)| if d { it.next().unwrap().clone() } else { x.clone() })
                .collect();
            let mut t = Tape::new();
            let (l, _) = eval(&full, &mut t)?;
            Ok(t.value(l).item())
        })?;
        Ok(max_rel_error(&analytic, &numeric, FLOOR))

    }
}

/// Runs `cases` random cases of every primitive; one result per primitive.
pub fn primitive_suite(cases: u64) -> Vec<PrimitiveCheck> {
    let mut suite = Suite::default();
    matmul_and_bias(&mut suite, cases);
    elementwise_arithmetic(&mut suite, cases);
    activations(&mut suite, cases);
    conv2d_with_stride_and_padding(&mut suite, cases);
    pooling_reshape_concat(&mut suite, cases);
    batchnorm_train_and_eval(&mut suite, cases);
    dropout_train_mode(&mut suite, cases);
    channel_scale_squeeze_excite_shape(&mut suite, cases);
    softmax_cross_entropy_mse(&mut suite, cases);
    suite.results.into_values().collect()
}

fn randn(shape: &[usize], r: &mut rng::Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(r)).collect()).unwrap()
}

/// Keeps values away from kinks so differences stay on one side.
fn away_from_zero(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        if v.abs() < 1e-2 {
            *v += 0.05;
        }
    }
    t
}

fn probs(rows: usize, cols: usize, r: &mut rng::Rng) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let row: Vec<f64> = (0..cols).map(|_| r.gen::<f64>() + 0.05).collect();
        let s: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / s));
    }
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// Projects `out` onto fixed random weights so the scalar exercises every output element.
fn project(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w)?;
    tape.sum(p)
}


fn dims(r: &mut rng::Rng, lo: usize, hi: usize) -> usize {
    r.gen_range(lo..=hi)
}

fn matmul_and_bias(suite: &mut Suite, cases: u64) {
    for s in 0..cases {
        let mut r = rng::rng(s);
        let (n, k, m) = (dims(&mut r, 1, 4), dims(&mut r, 1, 5), dims(&mut r, 1, 4));
        let x = randn(&[n, k], &mut r);
        let w = randn(&[k, m], &mut r);
        let b = randn(&[m], &mut r);
        suite.check("matmul+bias_add", vec![x, w, b], &[true, true, true], s, |t, v| {
            let y = t.matmul(v[0], v[1])?;
            t.bias_add(y, v[2])
        });
    }
}

fn elementwise_arithmetic(suite: &mut Suite, cases: u64) {
    for s in 0..cases {
        let mut r = rng::rng(100 + s);
        let shape = [dims(&mut r, 1, 3), dims(&mut r, 1, 4)];
        let a = randn(&shape, &mut r);
        let b = randn(&shape, &mut r);
        let c = randn(&shape, &mut r);
        suite.check("add/sub/mul/scale/mean", vec![a, b, c], &[true, true, true], s, |t, v| {
            let x = t.add(v[0], v[1])?;
            let y = t.mul(x, v[2])?;
            let z = t.sub(y, v[1])?;
            let z = t.scale(z, 0.7)?;
            let m = t.mean(z)?;
            let s = t.sum(z)?;
            t.add(m, s)
        });
    }
}

fn activations(suite: &mut Suite, cases: u64) {
    for s in 0..cases {
        let mut r = rng::rng(200 + s);
        let shape = [dims(&mut r, 1, 3), dims(&mut r, 1, 5)];
        let x = away_from_zero(randn(&shape, &mut r));
        suite.check("relu", vec![x.clone()], &[true], s, |t, v| t.relu(v[0]));
        suite.check("gelu", vec![x.clone()], &[true], s, |t, v| t.gelu(v[0]));
        suite.check("sigmoid", vec![x], &[true], s, |t, v| t.sigmoid(v[0]));
    }
}

fn conv2d_with_stride_and_padding(suite: &mut Suite, cases: u64) {
    for s in 0..cases {
        let mut r = rng::rng(300 + s);
        let (b, ci, co) = (dims(&mut r, 1, 2), dims(&mut r, 1, 3), dims(&mut r, 1, 3));
        let k = [1, 3][r.gen_range(0..2)];
        let (h, w) = (dims(&mut r, k, 6), dims(&mut r, k, 6));
        let stride = dims(&mut r, 1, 2);
        let pad = if k == 3 { dims(&mut r, 0, 1) } else { 0 };
        let x = randn(&[b, ci, h, w], &mut r);
        let wt = randn(&[co, ci, k, k], &mut r);
        let bias = randn(&[co], &mut r);
        suite.check("conv2d", vec![x, wt, bias], &[true, true, true], s, move |t, v| {
            let y = t.conv2d(v[0], v[1], stride, pad)?;
            t.bias_add(y, v[2])
        });
    }
}

fn pooling_reshape_concat(suite: &mut Suite, cases: u64) {
    for s in 0..cases {
        let mut r = rng::rng(400 + s);
        let b = dims(&mut r, 1, 2);
        let k = dims(&mut r, 1, 2);
        let (h, w) = (k * dims(&mut r, 1, 3), k * dims(&mut r, 1, 3));
        let c1 = dims(&mut r, 1, 3);
        let c2 = dims(&mut r, 1, 3);
        let x = randn(&[b, c1, h, w], &mut r);
        let y = randn(&[b, c2, h, w], &mut r);
        suite.check("avg_pool2d", vec![x.clone()], &[true], s, move |t, v| t.avg_pool2d(v[0], k));
        suite.check("global_avg_pool", vec![x.clone()], &[true], s, |t, v| t.global_avg_pool(v[0]));
        suite.check("flatten", vec![x.clone()], &[true], s, |t, v| t.flatten(v[0]));
        suite.check("concat_channels", vec![x, y], &[true, true], s, |t, v| t.concat_channels(&[v[0], v[1]]));
    }
}

fn batchnorm_train_and_eval(suite: &mut Suite, cases: u64) {
    for s in 0..cases {
        let mut r = rng::rng(500 + s);
        let c = dims(&mut r, 1, 3);
        let shape: Vec<usize> =
            if s % 2 == 0 { vec![dims(&mut r, 2, 4), c] } else { vec![dims(&mut r, 1, 3), c, dims(&mut r, 1, 3), 2] };
        let x = randn(&shape, &mut r);
        let g = randn(&[c], &mut r);
        let be = randn(&[c], &mut r);
        suite.check("batchnorm(train)", vec![x.clone(), g.clone(), be.clone()], &[true, true, true], s, |t, v| {
            Ok(t.batchnorm_train(v[0], v[1], v[2])?.0)
        });
        let rm: Vec<f64> = (0..c).map(|i| 0.1 * i as f64).collect();
        let rv: Vec<f64> = (0..c).map(|i| 0.5 + i as f64).collect();
        suite.check("batchnorm(eval)", vec![x, g, be], &[true, true, true], s, move |t, v| {
            t.batchnorm_eval(v[0], v[1], v[2], &rm, &rv)
        });
    }
}

fn dropout_train_mode(suite: &mut Suite, cases: u64) {
    for s in 0..cases {
        let mut r = rng::rng(600 + s);
        let x = randn(&[dims(&mut r, 1, 4), dims(&mut r, 1, 6)], &mut r);
        suite.check("dropout", vec![x], &[true], s, move |t, v| t.dropout(v[0], 0.3, s, Mode::Train));
    }
}

fn channel_scale_squeeze_excite_shape(suite: &mut Suite, cases: u64) {
    for s in 0..cases {
        let mut r = rng::rng(700 + s);
        let (b, c) = (dims(&mut r, 1, 2), dims(&mut r, 1, 4));
        let x = randn(&[b, c, dims(&mut r, 1, 3), dims(&mut r, 1, 3)], &mut r);
        let sc = randn(&[b, c], &mut r);
        suite.check("channel_scale", vec![x, sc], &[true, true], s, |t, v| t.channel_scale(v[0], v[1]));
    }
}

fn softmax_cross_entropy_mse(suite: &mut Suite, cases: u64) {
    for s in 0..cases {
        let mut r = rng::rng(800 + s);
        let (rows, cols) = (dims(&mut r, 1, 4), dims(&mut r, 2, 6));
        let logits = randn(&[rows, cols], &mut r);
        let tau = [1.0, 2.0, 4.0][s as usize % 3];
        suite.check("softmax_with_temperature", vec![logits.clone()], &[true], s, move |t, v| t.softmax(v[0], tau));

        let target = probs(rows, cols, &mut r);
        let target_logits = randn(&[rows, cols], &mut r);
        // CE composed with softmax so perturbations keep the prediction stochastic
        suite.check("cross_entropy(softmax)", vec![logits.clone(), target.clone()], &[true, false], s, move |t, v| {
            let p = t.softmax(v[0], tau)?;
            t.cross_entropy(p, v[1])
        });
        // gradient with respect to the target distribution (parameterized by its logits)
        suite.check("cross_entropy(target)", vec![logits, target_logits], &[true, true], s, |t, v| {
            let p = t.softmax(v[0], 1.0)?;
            let q = t.softmax(v[1], 1.0)?;
            t.cross_entropy(p, q)
        });

        let a = randn(&[rows, cols], &mut r);
        let b = randn(&[rows, cols], &mut r);
        suite.check("mse", vec![a, b], &[true, true], s, |t, v| t.mse(v[0], v[1]));
    }
}
