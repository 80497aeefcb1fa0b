//! Layer descriptors and their trait-object implementations.

use std::fmt;

use mlfd_numerics::{rng, BatchStats, Mode, Parameter, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Serializable layer description. Shapes are per sample (no batch axis).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerDesc {
    Dense {
        units: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    BatchNorm,
    Relu,
    Gelu,
    AvgPool {
        size: usize,
    },
    GlobalAvgPool,
    Flatten,
    Dropout {
        p: f64,
    },
    SqueezeExcite {
        reduction: usize,
    },
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

impl LayerDesc {
    pub fn dense(units: usize) -> Self {
        LayerDesc::Dense { units, bias: true }
    }

    pub fn conv(out_channels: usize, kernel: usize, padding: usize) -> Self {
        LayerDesc::Conv { out_channels, kernel, stride: 1, padding, bias: true }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerDesc::Dense { .. } => "dense",
            LayerDesc::Conv { .. } => "conv",
            LayerDesc::BatchNorm => "batch_norm",
            LayerDesc::Relu => "relu",
            LayerDesc::Gelu => "gelu",
            LayerDesc::AvgPool { .. } => "avg_pool",
            LayerDesc::GlobalAvgPool => "global_avg_pool",
            LayerDesc::Flatten => "flatten",
            LayerDesc::Dropout { .. } => "dropout",
            LayerDesc::SqueezeExcite { .. } => "squeeze_excite",
        }
    }

    /// Instantiates the layer for a per-sample input shape, or explains why
    /// that shape cannot feed it.
    pub fn build(&self, input: &[usize]) -> std::result::Result<Box<dyn Layer>, String> {
        let spatial = |what: &str| -> std::result::Result<(usize, usize, usize), String> {
            match *input {
                [c, h, w] => Ok((c, h, w)),
                _ => Err(format!("{what} expects a [channels, h, w] input, got {input:?}")),
            }
        };
        Ok(match *self {
            LayerDesc::Dense { units, bias } => {
                let [features] = *input else {
                    return Err(format!("dense expects a flat [features] input, got {input:?}"));
                };
                positive(units, "units")?;
                Box::new(Dense { inp: features, units, bias, out: vec![units] })
            }
            LayerDesc::Conv { out_channels, kernel, stride, padding, bias } => {
                let (c, h, w) = spatial("conv")?;
                positive(out_channels, "out_channels")?;
                positive(kernel, "kernel")?;
                positive(stride, "stride")?;
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(format!("conv kernel {kernel} larger than padded input {input:?}"));
                }
                let oh = (h + 2 * padding - kernel) / stride + 1;
                let ow = (w + 2 * padding - kernel) / stride + 1;
                Box::new(Conv { inp: c, kernel, stride, padding, bias, out: vec![out_channels, oh, ow] })
            }
            LayerDesc::BatchNorm => {
                if input.is_empty() {
                    return Err("batch_norm needs a channel axis".into());
                }
                Box::new(BatchNorm { channels: input[0], out: input.to_vec() })
            }
            LayerDesc::Relu => Box::new(Activation { gelu: false, out: input.to_vec() }),
            LayerDesc::Gelu => Box::new(Activation { gelu: true, out: input.to_vec() }),
            LayerDesc::AvgPool { size } => {
                let (c, h, w) = spatial("avg_pool")?;
                positive(size, "size")?;
                if h % size != 0 || w % size != 0 {
                    return Err(format!("avg_pool size {size} does not divide {h}x{w}"));
                }
                Box::new(AvgPool { size, out: vec![c, h / size, w / size] })
            }
            LayerDesc::GlobalAvgPool => {
                let (c, _, _) = spatial("global_avg_pool")?;
                Box::new(GlobalAvgPool { out: vec![c] })
            }
            LayerDesc::Flatten => Box::new(Flatten { out: vec![input.iter().product()] }),
            LayerDesc::Dropout { p } => {
                if !(0.0..1.0).contains(&p) {
                    return Err(format!("dropout p={p} outside [0, 1)"));
                }
                Box::new(Dropout { p, out: input.to_vec() })
            }
            LayerDesc::SqueezeExcite { reduction } => {
                let (c, _, _) = spatial("squeeze_excite")?;
                positive(reduction, "reduction")?;
                Box::new(SqueezeExcite { channels: c, hidden: (c / reduction).max(1), out: input.to_vec() })
            }
        })
    }
}

fn positive(v: usize, name: &str) -> std::result::Result<(), String> {
    if v == 0 {
        Err(format!("{name} must be >= 1"))
    } else {
        Ok(())
    }
}

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Xavier { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub struct ParamDecl {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Clone, Debug)]
pub struct BufferDecl {
    pub name: &'static str,
    pub len: usize,
    pub fill: f64,
}

/// Per-forward state shared by every layer call.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub mode: Mode,
    /// Base seed for dropout streams.
    pub seed: u64,
    /// Optimizer step counter, so each step draws fresh dropout masks.
    pub step: u64,
    /// Batch statistics from train-mode batchnorm: (store buffer index of the running mean, stats).
    pub stats: Vec<(usize, BatchStats)>,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, mode: Mode, seed: u64, step: u64) -> Self {
        Ctx { tape, mode, seed, step, stats: Vec::new() }
    }
}

/// A layer's view of its own slice of a parameter store.
pub struct Bound<'a> {
    pub params: &'a [Parameter],
    /// Tape key of `params[0]`.
    pub key: usize,
    pub buffers: &'a [Vec<f64>],
    /// Store index of `buffers[0]`.
    pub buffer_base: usize,
    /// Stable id of this layer for dropout streams.
    pub op_index: u64,
}

impl Bound<'_> {
    pub fn var(&self, tape: &mut Tape, j: usize) -> Var {
        tape.param(self.key + j, &self.params[j])
    }
}

pub trait Layer: fmt::Debug + Send + Sync {
    fn kind(&self) -> &'static str;
    /// Per-sample output shape.
    fn out_shape(&self) -> &[usize];
    fn params(&self) -> Vec<ParamDecl> {
        Vec::new()
    }
    fn buffers(&self) -> Vec<BufferDecl> {
        Vec::new()
    }
    fn forward(&self, cx: &mut Ctx, b: &Bound, x: Var) -> Result<Var>;
}

#[derive(Debug)]
struct Dense {
    inp: usize,
    units: usize,
    bias: bool,
    out: Vec<usize>,
}

impl Layer for Dense {
    fn kind(&self) -> &'static str {
        "dense"
    }
    fn out_shape(&self) -> &[usize] {
        &self.out
    }
    fn params(&self) -> Vec<ParamDecl> {
        let mut p = vec![ParamDecl {
            name: "weight",
            shape: vec![self.inp, self.units],
            init: Init::Xavier { fan_in: self.inp, fan_out: self.units },
        }];
        if self.bias {
            p.push(ParamDecl { name: "bias", shape: vec![self.units], init: Init::Zeros });
        }
        p
    }
    fn forward(&self, cx: &mut Ctx, b: &Bound, x: Var) -> Result<Var> {
        let w = b.var(cx.tape, 0);
        let y = cx.tape.matmul(x, w)?;
        if self.bias {
            let bias = b.var(cx.tape, 1);
            Ok(cx.tape.bias_add(y, bias)?)
        } else {
            Ok(y)
        }
    }
}

#[derive(Debug)]
struct Conv {
    inp: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    bias: bool,
    out: Vec<usize>,
}

impl Layer for Conv {
    fn kind(&self) -> &'static str {
        "conv"
    }
    fn out_shape(&self) -> &[usize] {
        &self.out
    }
    fn params(&self) -> Vec<ParamDecl> {
        let k2 = self.kernel * self.kernel;
        let oc = self.out[0];
        let mut p = vec![ParamDecl {
            name: "weight",
            shape: vec![oc, self.inp, self.kernel, self.kernel],
            init: Init::Xavier { fan_in: self.inp * k2, fan_out: oc * k2 },
        }];
        if self.bias {
            p.push(ParamDecl { name: "bias", shape: vec![oc], init: Init::Zeros });
        }
        p
    }
    fn forward(&self, cx: &mut Ctx, b: &Bound, x: Var) -> Result<Var> {
        let w = b.var(cx.tape, 0);
        let y = cx.tape.conv2d(x, w, self.stride, self.padding)?;
        if self.bias {
            let bias = b.var(cx.tape, 1);
            Ok(cx.tape.bias_add(y, bias)?)
        } else {
            Ok(y)
        }
    }
}

#[derive(Debug)]
struct BatchNorm {
    channels: usize,
    out: Vec<usize>,
}

impl Layer for BatchNorm {
    fn kind(&self) -> &'static str {
        "batch_norm"
    }
    fn out_shape(&self) -> &[usize] {
        &self.out
    }
    fn params(&self) -> Vec<ParamDecl> {
        vec![
            ParamDecl { name: "gamma", shape: vec![self.channels], init: Init::Ones },
            ParamDecl { name: "beta", shape: vec![self.channels], init: Init::Zeros },
        ]
    }
    fn buffers(&self) -> Vec<BufferDecl> {
        vec![
            BufferDecl { name: "running_mean", len: self.channels, fill: 0.0 },
            BufferDecl { name: "running_var", len: self.channels, fill: 1.0 },
        ]
    }
    fn forward(&self, cx: &mut Ctx, b: &Bound, x: Var) -> Result<Var> {
        let g = b.var(cx.tape, 0);
        let be = b.var(cx.tape, 1);
        match cx.mode {
            Mode::Train => {
                let (y, stats) = cx.tape.batchnorm_train(x, g, be)?;
                cx.stats.push((b.buffer_base, stats));
                Ok(y)
            }
            Mode::Eval => Ok(cx.tape.batchnorm_eval(x, g, be, &b.buffers[0], &b.buffers[1])?),
        }
    }
}

#[derive(Debug)]
struct Activation {
    gelu: bool,
    out: Vec<usize>,
}

impl Layer for Activation {
    fn kind(&self) -> &'static str {
        if self.gelu {
            "gelu"
        } else {
            "relu"
        }
    }
    fn out_shape(&self) -> &[usize] {
        &self.out
    }
    fn forward(&self, cx: &mut Ctx, _: &Bound, x: Var) -> Result<Var> {
        Ok(if self.gelu { cx.tape.gelu(x)? } else { cx.tape.relu(x)? })
    }
}

#[derive(Debug)]
struct AvgPool {
    size: usize,
    out: Vec<usize>,
}

impl Layer for AvgPool {
    fn kind(&self) -> &'static str {
        "avg_pool"
    }
    fn out_shape(&self) -> &[usize] {
        &self.out
    }
    fn forward(&self, cx: &mut Ctx, _: &Bound, x: Var) -> Result<Var> {
        Ok(cx.tape.avg_pool2d(x, self.size)?)
    }
}

#[derive(Debug)]
struct GlobalAvgPool {
    out: Vec<usize>,
}

impl Layer for GlobalAvgPool {
    fn kind(&self) -> &'static str {
        "global_avg_pool"
    }
    fn out_shape(&self) -> &[usize] {
        &self.out
    }
    fn forward(&self, cx: &mut Ctx, _: &Bound, x: Var) -> Result<Var> {
        Ok(cx.tape.global_avg_pool(x)?)
    }
}

#[derive(Debug)]
struct Flatten {
    out: Vec<usize>,
}

impl Layer for Flatten {
    fn kind(&self) -> &'static str {
        "flatten"
    }
    fn out_shape(&self) -> &[usize] {
        &self.out
    }
    fn forward(&self, cx: &mut Ctx, _: &Bound, x: Var) -> Result<Var> {
        Ok(cx.tape.flatten(x)?)
    }
}

#[derive(Debug)]
struct Dropout {
    p: f64,
    out: Vec<usize>,
}

impl Layer for Dropout {
    fn kind(&self) -> &'static str {
        "dropout"
    }
    fn out_shape(&self) -> &[usize] {
        &self.out
    }
    fn forward(&self, cx: &mut Ctx, b: &Bound, x: Var) -> Result<Var> {
        let seed = rng::dropout_seed(cx.seed, b.op_index, cx.step);
        Ok(cx.tape.dropout(x, self.p, seed, cx.mode)?)
    }
}

/// Channel gating: `x * sigmoid(W2 relu(W1 gap(x)))`.
#[derive(Debug)]
struct SqueezeExcite {
    channels: usize,
    hidden: usize,
    out: Vec<usize>,
}

impl Layer for SqueezeExcite {
    fn kind(&self) -> &'static str {
        "squeeze_excite"
    }
    fn out_shape(&self) -> &[usize] {
        &self.out
    }
    fn params(&self) -> Vec<ParamDecl> {
        let (c, h) = (self.channels, self.hidden);
        vec![
            ParamDecl { name: "reduce.weight", shape: vec![c, h], init: Init::Xavier { fan_in: c, fan_out: h } },
            ParamDecl { name: "reduce.bias", shape: vec![h], init: Init::Zeros },
            ParamDecl { name: "expand.weight", shape: vec![h, c], init: Init::Xavier { fan_in: h, fan_out: c } },
            ParamDecl { name: "expand.bias", shape: vec![c], init: Init::Zeros },
        ]
    }
    fn forward(&self, cx: &mut Ctx, b: &Bound, x: Var) -> Result<Var> {
        let squeezed = cx.tape.global_avg_pool(x)?;
        let w1 = b.var(cx.tape, 0);
        let b1 = b.var(cx.tape, 1);
        let w2 = b.var(cx.tape, 2);
        let b2 = b.var(cx.tape, 3);
        let h = cx.tape.matmul(squeezed, w1)?;
        let h = cx.tape.bias_add(h, b1)?;
        let h = cx.tape.relu(h)?;
        let s = cx.tape.matmul(h, w2)?;
        let s = cx.tape.bias_add(s, b2)?;
        let s = cx.tape.sigmoid(s)?;
        Ok(cx.tape.channel_scale(x, s)?)
    }
}

/// Error helper used when a descriptor list fails to chain.
pub(crate) fn chain_error(i: usize, desc: &LayerDesc, prev: Option<(usize, &LayerDesc)>, why: String) -> Error {
    match prev {
        Some((j, p)) => Error::Spec(format!("layer {i} ({}) cannot follow layer {j} ({}): {why}", desc.kind(), p.kind())),
        None => Error::Spec(format!("layer {i} ({}) cannot take the model input: {why}", desc.kind())),
    }
}
