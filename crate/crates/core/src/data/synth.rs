//! A family of related classification datasets drawn from one latent space.
//!
//! A pool of class prototypes is drawn once; dataset `i` takes its own
//! disjoint subset of them, moves them through a dataset-specific affine
//! style `z -> A_i z + b_i`, adds latent noise and renders through a decoder
//! shared by every dataset. Shared decoder and prototype distribution give
//! the datasets common low-level structure while label spaces stay disjoint.

use mlfd_numerics::{rng, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, Splits};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Render {
    /// Single-channel `side x side` image.
    Image { side: usize },
    Vector { features: usize },
}

impl Default for Render {
    fn default() -> Self {
        Render::Image { side: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticFamilySpec {
    pub m: usize,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    /// Class count per dataset.
    pub classes: Vec<usize>,
    /// Training samples per class, used when `train_size` is absent.
    #[serde(default = "default_samples_per_class")]
    pub samples_per_class: usize,
    /// Total generated training samples per dataset (validation is carved from these).
    #[serde(default)]
    pub train_size: Option<usize>,
    #[serde(default)]
    pub test_size: usize,
    #[serde(default)]
    pub val_fraction: f64,
    pub style_scale: f64,
    pub noise_sigma: f64,
    #[serde(default)]
    pub pixel_noise: f64,
    #[serde(default)]
    pub render: Render,
    /// Prototype pool size; defaults to the total class count.
    #[serde(default)]
    pub prototype_pool: Option<usize>,
    #[serde(default)]
    pub names: Option<Vec<String>>,
    #[serde(skip)]
    pub seed: u64,
}

fn default_latent_dim() -> usize {
    16
}

fn default_samples_per_class() -> usize {
    250
}

impl SyntheticFamilySpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("family: {msg}")));
        if self.m == 0 {
            return bad("m must be >= 1".into());
        }
        if self.classes.len() != self.m {
            return bad(format!("{} class counts for m = {}", self.classes.len(), self.m));
        }
        if let Some(c) = self.classes.iter().find(|&&c| c < 2) {
            return bad(format!("class count {c} < 2"));
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be >= 1".into());
        }
        if !(self.noise_sigma >= 0.0 && self.pixel_noise >= 0.0 && self.style_scale >= 0.0) {
            return bad("noise_sigma, pixel_noise and style_scale must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        let need: usize = self.classes.iter().sum();
        if need > self.pool() {
            return bad(format!("{need} classes requested but only {} prototypes available", self.pool()));
        }
        if self.train_count() == 0 {
            return bad("no training samples".into());
        }
        match self.render {
            Render::Image { side: 0 } | Render::Vector { features: 0 } => bad("render size must be >= 1".into()),
            _ => Ok(()),
        }?;
        if let Some(names) = &self.names {
            if names.len() != self.m {
                return bad(format!("{} names for m = {}", names.len(), self.m));
            }
        }
        Ok(())
    }

    pub fn pool(&self) -> usize {
        self.prototype_pool.unwrap_or_else(|| self.classes.iter().sum())
    }

    pub fn train_count_for(&self, classes: usize) -> usize {
        self.train_size.unwrap_or(self.samples_per_class * classes)
    }

    fn train_count(&self) -> usize {
        self.classes.iter().map(|&c| self.train_count_for(c)).min().unwrap_or(0)
    }

    pub fn name(&self, i: usize) -> String {
        match &self.names {
            Some(n) => n[i].clone(),
            None => format!("d{}", i + 1),
        }
    }

    fn sample_shape(&self) -> Vec<usize> {
        match self.render {
            Render::Image { side } => vec![1, side, side],
            Render::Vector { features } => vec![features],
        }
    }
}

fn gauss(r: &mut rng::Rng) -> f64 {
    StandardNormal.sample(r)
}

fn normals(n: usize, r: &mut rng::Rng) -> Vec<f64> {
    (0..n).map(|_| gauss(r)).collect()
}

fn prototypes(spec: &SyntheticFamilySpec) -> Vec<Vec<f64>> {
    let mut r = rng::rng(rng::derive_named(spec.seed, "prototypes"));
    (0..spec.pool()).map(|_| normals(spec.latent_dim, &mut r)).collect()
}

/// `(A_i row-major, b_i)` with `A_i = I + s G_i / sqrt(d)`, `b_i = s g_i`.
fn styles(spec: &SyntheticFamilySpec) -> Vec<(Vec<f64>, Vec<f64>)> {
    let d = spec.latent_dim;
    let s = spec.style_scale;
    (0..spec.m)
        .map(|i| {
            let mut r = rng::rng(rng::derive_named(spec.seed, &format!("style/{i}")));
            let g = normals(d * d, &mut r);
            let off = normals(d, &mut r);
            let mut a: Vec<f64> = g.iter().map(|v| s * v / (d as f64).sqrt()).collect();
            for k in 0..d {
                a[k * d + k] += 1.0;
            }
            (a, off.iter().map(|v| s * v).collect())
        })
        .collect()
}

fn apply_style(a: &[f64], b: &[f64], z: &[f64]) -> Vec<f64> {
    let d = z.len();
    (0..d).map(|r| b[r] + (0..d).map(|c| a[r * d + c] * z[c]).sum::<f64>()).collect()
}

/// Decoder columns, `[out_len x latent_dim]` row-major.
fn decoder(spec: &SyntheticFamilySpec) -> Vec<f64> {
    let d = spec.latent_dim;
    let mut r = rng::rng(rng::derive_named(spec.seed, "decoder"));
    match spec.render {
        Render::Vector { features } => {
            let scale = 1.0 / (d as f64).sqrt();
            normals(features * d, &mut r).into_iter().map(|v| v * scale).collect()
        }
        Render::Image { side } => {
            let px = side * side;
            let mut dec = vec![0.0; px * d];
            for k in 0..d {
                // each latent direction paints a few signed Gaussian blobs
                let mut pattern = vec![0.0; px];
                for _ in 0..3 {
                    let cy = r.gen::<f64>() * side as f64;
                    let cx = r.gen::<f64>() * side as f64;
                    let width = 1.5 + 2.0 * r.gen::<f64>();
                    let amp = if r.gen::<bool>() { 1.0 } else { -1.0 };
                    for y in 0..side {
                        for x in 0..side {
                            let dy = y as f64 + 0.5 - cy;
                            let dx = x as f64 + 0.5 - cx;
                            pattern[y * side + x] += amp * (-(dy * dy + dx * dx) / (2.0 * width * width)).exp();
                        }
                    }
                }
                let rms = (pattern.iter().map(|v| v * v).sum::<f64>() / px as f64).sqrt();
                let scale = 1.0 / (rms.max(1e-12) * (d as f64).sqrt());
                for p in 0..px {
                    dec[p * d + k] = pattern[p] * scale;
                }
            }
            dec
        }
    }
}

/// Generates the `m` datasets. Deterministic given `spec` (including `seed`).
pub fn gen_synthetic_family(spec: &SyntheticFamilySpec) -> Result<Vec<LabeledDataset>> {
    spec.validate()?;
    let d = spec.latent_dim;
    let protos = prototypes(spec);
    let styles = styles(spec);
    let dec = decoder(spec);
    let out_len: usize = spec.sample_shape().iter().product();

    let mut order: Vec<usize> = (0..spec.pool()).collect();
    order.shuffle(&mut rng::rng(rng::derive_named(spec.seed, "selection")));

    let mut offset = 0;
    let mut out = Vec::with_capacity(spec.m);
    for (i, &classes) in spec.classes.iter().enumerate() {
        let chosen = &order[offset..offset + classes];
        offset += classes;
        let (a, b) = &styles[i];
        let styled: Vec<Vec<f64>> = chosen.iter().map(|&p| apply_style(a, b, &protos[p])).collect();

        let n_train = spec.train_count_for(classes);
        let n = n_train + spec.test_size;
        let mut r = rng::rng(rng::derive_named(spec.seed, &format!("samples/{i}")));
        let mut data = Vec::with_capacity(n * out_len);
        let mut labels = Vec::with_capacity(n);
        for j in 0..n {
            let y = if j < n_train { j % classes } else { (j - n_train) % classes };
            let z: Vec<f64> = styled[y].iter().map(|v| v + spec.noise_sigma * gauss(&mut r)).collect();
            for p in 0..out_len {
                let clean: f64 = (0..d).map(|k| dec[p * d + k] * z[k]).sum();
                let noise: f64 = if spec.pixel_noise > 0.0 { spec.pixel_noise * gauss(&mut r) } else { 0.0 };
                data.push(clean + noise);
            }
            labels.push(y);
        }

        let splits = carve_validation(&labels[..n_train], classes, spec.val_fraction, n, rng::derive_named(spec.seed, &format!("val/{i}")));
        let mut shape = vec![n];
        shape.extend(spec.sample_shape());
        let inputs = Tensor::new(shape, data)?;
        out.push(LabeledDataset::new(spec.name(i), inputs, labels, classes, splits)?);
    }
    Ok(out)
}

/// Stratified validation carve: `floor(frac * count_c)` random training
/// samples of each class move to validation. Samples `train_labels.len()..n` are test.
fn carve_validation(train_labels: &[usize], classes: usize, frac: f64, n: usize, seed: u64) -> Splits {
    let mut r = rng::rng(seed);
    let mut val = Vec::new();
    for c in 0..classes {
        let mut members: Vec<usize> = (0..train_labels.len()).filter(|&j| train_labels[j] == c).collect();
        members.shuffle(&mut r);
        let take = (frac * members.len() as f64).floor() as usize;
        val.extend_from_slice(&members[..take]);
    }
    val.sort_unstable();
    let mut is_val = vec![false; train_labels.len()];
    for &v in &val {
        is_val[v] = true;
    }
    Splits {
        train: (0..train_labels.len()).filter(|&j| !is_val[j]).collect(),
        val,
        test: (train_labels.len()..n).collect(),
    }
}

/// Mean distance between the styled images of one shared prototype under two
/// different datasets' styles, averaged over the pool and all dataset pairs.
/// Zero for `m = 1` or a zero style scale.
pub fn style_shift(spec: &SyntheticFamilySpec) -> Result<f64> {
    spec.validate()?;
    let protos = prototypes(spec);
    let styles = styles(spec);
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..spec.m {
        for j in i + 1..spec.m {
            for p in &protos {
                let zi = apply_style(&styles[i].0, &styles[i].1, p);
                let zj = apply_style(&styles[j].0, &styles[j].1, p);
                total += zi.iter().zip(&zj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn spec() -> SyntheticFamilySpec {
        SyntheticFamilySpec {
            m: 2,
            latent_dim: 4,
            classes: vec![3, 2],
            samples_per_class: 10,
            train_size: None,
            test_size: 6,
            val_fraction: 0.2,
            style_scale: 0.5,
            noise_sigma: 0.3,
            pixel_noise: 0.0,
            render: Render::Image { side: 8 },
            prototype_pool: None,
            names: None,
            seed: 3,
        }
    }

    #[test]
    fn validation_split_is_stratified() {
        let ds = gen_synthetic_family(&spec()).unwrap();
        let d = &ds[0];
        assert_eq!(d.len(), 36);
        assert_eq!(d.splits.val.len(), 6);
        for c in 0..3 {
            assert_eq!(d.splits.val.iter().filter(|&&i| d.labels[i] == c).count(), 2);
        }
        assert_eq!(d.splits.test, (30..36).collect::<Vec<_>>());
    }

    #[test]
    fn too_few_prototypes_is_a_config_error() {
        let mut s = spec();
        s.prototype_pool = Some(4);
        assert!(matches!(gen_synthetic_family(&s), Err(Error::Config(_))));
    }

    #[test]
    fn identity_style_has_zero_shift() {
        let mut s = spec();
        s.style_scale = 0.0;
        assert_eq!(style_shift(&s).unwrap(), 0.0);
    }
}
