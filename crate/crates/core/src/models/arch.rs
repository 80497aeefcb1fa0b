//! Built-in architecture families, selectable by name.
//!
//! Every family exposes the same four levels, from the input side:
//! `stage1`, `stage2`, `stage3` and `top` (the pre-head embedding).
//! For the convolutional families on a 16x16 input the three stage maps are
//! 16x16, 8x8 and 4x4.

use serde::{Deserialize, Serialize};

use super::layers::LayerDesc;
use super::spec::{ModelSpec, Tap, TapSet};
use crate::error::{Error, Result};

pub const LEVELS: [&str; 4] = ["stage1", "stage2", "stage3", "top"];

/// Level ids of tap set `L<k>`: the `k` deepest levels.
pub fn tap_set_levels(label: &str) -> Result<Vec<String>> {
    let k: usize = label
        .strip_prefix('L')
        .and_then(|n| n.parse().ok())
        .filter(|k| (1..=LEVELS.len()).contains(k))
        .ok_or_else(|| Error::Config(format!("unknown tap set '{label}' (L1..L{})", LEVELS.len())))?;
    Ok(LEVELS[LEVELS.len() - k..].iter().map(|s| s.to_string()).collect())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchOptions {
    /// Per-stage widths (channels or units).
    #[serde(default)]
    pub widths: Option<[usize; 3]>,
    /// Width of the pre-head embedding.
    #[serde(default)]
    pub hidden: Option<usize>,
    /// Dropout before the head.
    #[serde(default)]
    pub dropout: f64,
}

pub trait Architecture: Send + Sync {
    fn name(&self) -> &'static str;
    fn describe(&self) -> &'static str;
    fn spec(&self, input: &[usize], classes: usize, opts: &ArchOptions) -> Result<ModelSpec>;
}

struct MlpSmall;
struct CnnSmall;
struct CnnSe;

static REGISTRY: &[&dyn Architecture] = &[&MlpSmall, &CnnSmall, &CnnSe];

pub fn architecture_names() -> impl Iterator<Item = &'static str> {
    REGISTRY.iter().map(|a| a.name())
}

pub fn architecture(name: &str) -> Result<&'static dyn Architecture> {
    REGISTRY.iter().copied().find(|a| a.name() == name).ok_or_else(|| {
        Error::Config(format!("unknown architecture '{name}' (known: {})", architecture_names().collect::<Vec<_>>().join(", ")))
    })
}

/// Appends the optional dropout, records `top`, and assembles the spec.
fn finish(name: &str, input: &[usize], mut layers: Vec<LayerDesc>, mut taps: Vec<Tap>, classes: usize, dropout: f64) -> Result<ModelSpec> {
    taps.push(Tap::new("top", layers.len()));
    if dropout > 0.0 {
        layers.push(LayerDesc::Dropout { p: dropout });
    }
    let spec = ModelSpec { name: name.to_string(), input: input.to_vec(), layers, head: classes, taps: TapSet::new(taps)? };
    spec.validate()?;
    Ok(spec)
}

impl Architecture for MlpSmall {
    fn name(&self) -> &'static str {
        "mlp-small"
    }
    fn describe(&self) -> &'static str {
        "flatten, three dense+GELU stages, dense+GELU embedding"
    }
    fn spec(&self, input: &[usize], classes: usize, o: &ArchOptions) -> Result<ModelSpec> {
        let w = o.widths.unwrap_or([64, 64, 32]);
        let mut layers = vec![LayerDesc::Flatten];
        let mut taps = Vec::new();
        for (stage, &units) in w.iter().enumerate() {
            layers.push(LayerDesc::dense(units));
            layers.push(LayerDesc::Gelu);
            taps.push(Tap::new(LEVELS[stage], layers.len()));
        }
        layers.push(LayerDesc::dense(o.hidden.unwrap_or(32)));
        layers.push(LayerDesc::Gelu);
        finish(self.name(), input, layers, taps, classes, o.dropout)
    }
}

fn conv_stages(input: &[usize], o: &ArchOptions, squeeze: bool) -> Result<(Vec<LayerDesc>, Vec<Tap>)> {
    match *input {
        [_, h, w] if h % 4 == 0 && w % 4 == 0 => {}
        _ => return Err(Error::Config(format!("convolutional families need a [c, h, w] input with h, w divisible by 4, got {input:?}"))),
    }
    let w = o.widths.unwrap_or([8, 16, 32]);
    let mut layers = Vec::new();
    let mut taps = Vec::new();
    for (stage, &ch) in w.iter().enumerate() {
        if stage > 0 {
            layers.push(LayerDesc::AvgPool { size: 2 });
        }
        layers.push(LayerDesc::conv(ch, 3, 1));
        layers.push(LayerDesc::BatchNorm);
        layers.push(LayerDesc::Gelu);
        if squeeze && stage > 0 {
            layers.push(LayerDesc::SqueezeExcite { reduction: 4 });
        }
        taps.push(Tap::new(LEVELS[stage], layers.len()));
    }
    layers.push(LayerDesc::GlobalAvgPool);
    layers.push(LayerDesc::dense(o.hidden.unwrap_or(2 * w[2])));
    layers.push(LayerDesc::Gelu);
    Ok((layers, taps))
}

impl Architecture for CnnSmall {
    fn name(&self) -> &'static str {
        "cnn-small"
    }
    fn describe(&self) -> &'static str {
        "three conv+batchnorm+GELU stages with 2x average pooling, global pooling, dense+GELU embedding"
    }
    fn spec(&self, input: &[usize], classes: usize, o: &ArchOptions) -> Result<ModelSpec> {
        let (layers, taps) = conv_stages(input, o, false)?;
        finish(self.name(), input, layers, taps, classes, o.dropout)
    }
}

impl Architecture for CnnSe {
    fn name(&self) -> &'static str {
        "cnn-se"
    }
    fn describe(&self) -> &'static str {
        "cnn-small with squeeze-excite gating after stages 2 and 3"
    }
    fn spec(&self, input: &[usize], classes: usize, o: &ArchOptions) -> Result<ModelSpec> {
        let (layers, taps) = conv_stages(input, o, true)?;
        finish(self.name(), input, layers, taps, classes, o.dropout)
    }
}
