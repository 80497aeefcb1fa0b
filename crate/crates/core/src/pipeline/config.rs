use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticFamilySpec;
use crate::distill::KDConfig;
use crate::error::{Error, IoContext, Result};
use crate::fusion::FusionConfig;
use crate::models::{architecture, tap_set_levels, ArchOptions, LayerDesc, ModelSpec, TapSet};
use crate::train::TrainConfig;
use crate::util::sha256_hex;

/// Which experiment the pipeline runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// One teacher per dataset, every dataset in the joint teacher.
    #[default]
    Standard,
    /// Every teacher uses the first teacher's architecture.
    SameArch,
    /// Every teacher is trained on the same dataset; only that dataset is distilled.
    SameDatasetTeacher,
    /// One dataset is left out of the joint teacher and still gets a student.
    CrossDataset,
    /// Each student learns from its own individual teacher, no fusion.
    SingleDatasetKd,
    /// Only the first `vary_m` datasets take part.
    VaryM,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Standard => "standard",
            Variant::SameArch => "same-arch",
            Variant::SameDatasetTeacher => "same-dataset-teacher",
            Variant::CrossDataset => "cross-dataset",
            Variant::SingleDatasetKd => "single-dataset-kd",
            Variant::VaryM => "vary-m",
        }
    }
}

/// A model given either by architecture name or as an explicit layer list.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelChoice {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub widths: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    #[serde(default)]
    pub dropout: f64,
    /// Explicit layers (without the head); requires `taps`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<LayerDesc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taps: Option<TapSet>,
    /// Pre-trained checkpoint used instead of training (teachers only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl ModelChoice {
    pub fn arch(name: &str) -> Self {
        ModelChoice { arch: Some(name.to_string()), ..Default::default() }
    }

    pub fn spec(&self, name: &str, input: &[usize], classes: usize) -> Result<ModelSpec> {
        let mut spec = match (&self.arch, &self.layers) {
            (Some(a), None) => {
                let opts = ArchOptions { widths: self.widths, hidden: self.hidden, dropout: self.dropout };
                architecture(a)?.spec(input, classes, &opts)?
            }
            (None, Some(layers)) => {
                let taps = self.taps.clone().ok_or_else(|| Error::Config(format!("{name}: explicit layers need `taps`")))?;
                let spec = ModelSpec { name: String::new(), input: input.to_vec(), layers: layers.clone(), head: classes, taps };
                spec.validate()?;
                spec
            }
            _ => return Err(Error::Config(format!("{name}: give exactly one of `arch` or `layers`"))),
        };
        spec.name = name.to_string();
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Generator seed of the synthetic family.
    #[serde(default)]
    pub seed: u64,
    /// Existing dataset directories; when non-empty the family is not generated.
    #[serde(default)]
    pub paths: Vec<PathBuf>,
    pub family: Option<SyntheticFamilySpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub teacher: TrainConfig,
    pub joint: TrainConfig,
    /// Students and every student-architecture baseline.
    pub student: TrainConfig,
    /// Brief head fit on the frozen joint trunk for a left-out dataset.
    pub probe: TrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantOptions {
    /// 1-based dataset left out of the joint teacher (default: the last one).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub excluded: Option<usize>,
    /// Number of datasets taking part under `vary-m`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vary_m: Option<usize>,
    /// 1-based dataset every teacher trains on under `same-dataset-teacher` (default 1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub same_dataset: Option<usize>,
}

pub const METHODS: [&str; 4] = ["dataset-specific", "multi-head", "joint-head", "mlfd"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    /// Root of every random stream.
    #[serde(default)]
    pub master_seed: u64,
    /// Replicate ids; each gets its own training seeds.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub variant: Variant,
    /// Levels distilled and fused in the main run (`L1`..`L4`).
    #[serde(default = "default_tap_set")]
    pub tap_set: String,
    /// Tap sets swept by `ablate`.
    #[serde(default = "default_ablation")]
    pub ablation_tap_sets: Vec<String>,
    /// Training methods run by `run-all`, from the method registry.
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    /// Evaluate the test split every epoch for `curves.csv`.
    #[serde(default = "default_true")]
    pub curves: bool,
    pub data: DataConfig,
    /// One per dataset.
    pub teachers: Vec<ModelChoice>,
    /// One for every dataset, or one per dataset.
    pub students: Vec<ModelChoice>,
    #[serde(default)]
    pub kd: KDConfig,
    /// Optional per-dataset replacements of `kd`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub kd_per_dataset: Vec<KDConfig>,
    #[serde(default)]
    pub fusion: FusionConfig,
    pub train: TrainSection,
    #[serde(default)]
    pub variants: VariantOptions,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_tap_set() -> String {
    "L2".into()
}

fn default_ablation() -> Vec<String> {
    vec!["L1".into(), "L2".into(), "L3".into(), "L4".into()]
}

fn default_methods() -> Vec<String> {
    METHODS.iter().map(|s| s.to_string()).collect()
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    /// Number of datasets in the family.
    pub fn dataset_count(&self) -> usize {
        match &self.data.family {
            Some(f) if self.data.paths.is_empty() => f.m,
            _ => self.data.paths.len(),
        }
    }

    pub fn student_choice(&self, d: usize) -> &ModelChoice {
        if self.students.len() == 1 {
            &self.students[0]
        } else {
            &self.students[d]
        }
    }

    pub fn kd_for(&self, d: usize) -> &KDConfig {
        self.kd_per_dataset.get(d).unwrap_or(&self.kd)
    }

    /// KD weights for dataset `d` under tap set `tap`. A beta list sized for
    /// another tap set is replaced by its first weight on every level.
    pub fn kd_at(&self, d: usize, tap: &str) -> Result<KDConfig> {
        let k = tap_set_levels(tap)?.len();
        let mut kd = self.kd_for(d).clone();
        if kd.betas.len() != k {
            let b = kd.betas.first().copied().unwrap_or(0.0);
            kd.betas = vec![b; k];
        }
        Ok(kd)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.dataset_count();
        if m == 0 {
            return Err(Error::Config("data: give `paths` or a `family`".into()));
        }
        if let Some(f) = &self.data.family {
            if self.data.paths.is_empty() {
                f.validate()?;
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.teachers.len() != m {
            return Err(Error::Config(format!("{} teachers for {m} datasets", self.teachers.len())));
        }
        if self.students.len() != 1 && self.students.len() != m {
            return Err(Error::Config(format!("{} students for {m} datasets (give 1 or {m})", self.students.len())));
        }
        if !self.kd_per_dataset.is_empty() && self.kd_per_dataset.len() != m {
            return Err(Error::Config(format!("{} kd_per_dataset entries for {m} datasets", self.kd_per_dataset.len())));
        }
        let k = tap_set_levels(&self.tap_set)?.len();
        for d in 0..m {
            self.kd_for(d).validate(k)?;
        }
        for t in &self.ablation_tap_sets {
            tap_set_levels(t)?;
        }
        for name in &self.methods {
            super::methods::method(name)?;
        }
        for t in [&self.train.teacher, &self.train.joint, &self.train.student, &self.train.probe] {
            t.validate()?;
        }
        let one_based = |v: Option<usize>, key: &str| -> Result<()> {
            match v {
                Some(i) if i == 0 || i > m => Err(Error::Config(format!("variants.{key} = {i} outside 1..={m}"))),
                _ => Ok(()),
            }
        };
        one_based(self.variants.excluded, "excluded")?;
        one_based(self.variants.same_dataset, "same_dataset")?;
        match (self.variant, self.variants.vary_m) {
            (Variant::VaryM, None) => return Err(Error::Config("variant vary-m needs variants.vary_m".into())),
            (_, Some(v)) if v == 0 || v > m => return Err(Error::Config(format!("variants.vary_m = {v} outside 1..={m}"))),
            _ => {}
        }
        if self.variant == Variant::CrossDataset && m < 2 {
            return Err(Error::Config("cross-dataset needs at least two datasets".into()));
        }
        Ok(())
    }
}

/// A parsed config with its provenance.
#[derive(Clone, Debug)]
pub struct ResolvedConfig {
    pub config: ExperimentConfig,
    pub path: Option<PathBuf>,
    pub overrides: Vec<String>,
    /// Dotted keys filled in from defaults.
    pub defaulted: Vec<String>,
}

impl ResolvedConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let mut r = Self::parse(&text, overrides)?;
        r.path = Some(path.to_path_buf());
        Ok(r)
    }

    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut raw: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut raw, o)?;
        }
        let config: ExperimentConfig = raw.clone().try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        let full = toml::Value::try_from(&config).expect("config serializes");
        let mut defaulted = Vec::new();
        missing_keys(&full, &raw, "", &mut defaulted);
        Ok(ResolvedConfig { config, path: None, overrides: overrides.to_vec(), defaulted })
    }

    /// Hash of the fully defaulted config; independent of key order and of
    /// whether a value was written out or defaulted.
    pub fn hash(&self) -> String {
        config_hash(&self.config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(&self.config).expect("config serializes")
    }

    /// Resolved TOML preceded by comment lines recording provenance.
    pub fn frozen_copy(&self) -> String {
        let mut s = String::new();
        if let Some(p) = &self.path {
            s.push_str(&format!("# source: {}\n", p.display()));
        }
        for o in &self.overrides {
            s.push_str(&format!("# override: {o}\n"));
        }
        for d in &self.defaulted {
            s.push_str(&format!("# default: {d}\n"));
        }
        s.push_str(&format!("# hash: {}\n\n", self.hash()));
        s.push_str(&self.to_toml());
        s
    }
}

pub fn config_hash(c: &ExperimentConfig) -> String {
    // serde_json::Value maps are ordered, so this is canonical
    let v = serde_json::to_value(c).expect("config serializes");
    sha256_hex(v.to_string().as_bytes())
}

/// Applies `a.b.c=value`; the value is parsed as TOML, falling back to a string.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, value) = spec.split_once('=').ok_or_else(|| Error::Config(format!("override '{spec}' is not key=value")))?;
    let value = value.trim();
    let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = root;
    for (i, p) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            toml::Value::Table(t) => {
                if last {
                    t.insert(p.to_string(), parsed);
                    return Ok(());
                }
                t.entry(p.to_string()).or_insert_with(|| toml::Value::Table(Default::default()))
            }
            toml::Value::Array(a) => {
                let idx: usize = p.parse().map_err(|_| Error::Config(format!("override '{key}': '{p}' is not an index")))?;
                let len = a.len();
                let slot = a.get_mut(idx).ok_or_else(|| Error::Config(format!("override '{key}': index {idx} outside 0..{len}")))?;
                if last {
                    *slot = parsed;
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::Config(format!("override '{key}': '{p}' is inside a non-table value"))),
        };
    }
    Ok(())
}

fn missing_keys(full: &toml::Value, raw: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    let (toml::Value::Table(f), Some(r)) = (full, raw.as_table()) else { return };
    for (k, v) in f {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match r.get(k) {
            None => out.push(key),
            Some(rv) => missing_keys(v, rv, &key, out),
        }
    }
}

/// Documented defaults of every config section, as emitted by `config-reference`.
pub fn config_reference() -> String {
    let mut s = String::new();
    s.push_str("# Experiment config reference. Keys marked (required) have no default.\n\n");
    s.push_str("name = \"experiment\"          # run label\n");
    s.push_str("master_seed = 0               # root of every random stream\n");
    s.push_str("seeds = [0]                   # replicate ids\n");
    s.push_str("variant = \"standard\"          # standard | same-arch | same-dataset-teacher | cross-dataset | single-dataset-kd | vary-m\n");
    s.push_str("tap_set = \"L2\"                # L1 = top, L2 = stage3+top, L3, L4 = all four levels\n");
    s.push_str("ablation_tap_sets = [\"L1\", \"L2\", \"L3\", \"L4\"]\n");
    s.push_str(&format!("methods = {:?}\n", METHODS));
    s.push_str("curves = true                 # per-epoch test accuracy for curves.csv\n\n");
    s.push_str("[data]\nseed = 0\npaths = []                    # dataset dirs; overrides [data.family]\n\n");
    s.push_str("[data.family]                 # synthetic family (required unless paths given)\n");
    s.push_str("m = 3                         # (required)\nclasses = [8, 8, 8]           # (required)\n");
    s.push_str("style_scale = 0.5             # (required)\nnoise_sigma = 1.0             # (required)\n");
    s.push_str("latent_dim = 16\nsamples_per_class = 250\n# train_size = 2000           # overrides samples_per_class\n");
    s.push_str("test_size = 0\nval_fraction = 0.0\npixel_noise = 0.0\nrender = { kind = \"image\", side = 16 }   # or { kind = \"vector\", features = N }\n");
    s.push_str("# prototype_pool = 24         # default: total class count\n# names = [\"d1\", \"d2\", \"d3\"]\n\n");
    s.push_str("[[teachers]]                  # one per dataset (required)\narch = \"cnn-small\"            # ");
    s.push_str(&crate::models::architecture_names().collect::<Vec<_>>().join(" | "));
    s.push_str("\n# widths = [8, 16, 32]\n# hidden = 64\ndropout = 0.0\n# layers = [...]               # explicit layer list instead of arch, with taps\n\n");
    s.push_str("[[students]]                  # one, or one per dataset (required)\narch = \"cnn-small\"\n\n");
    let kd = KDConfig::default();
    s.push_str(&format!("[kd]\nalpha = {}\nbetas = {:?}                # one per tap-set level\ntau = {}\n\n", kd.alpha, kd.betas, kd.tau));
    let f = FusionConfig::default();
    s.push_str(&format!("[fusion]\nfusion_dropout = {}\ntrunk_dropout = {}\n\n", f.fusion_dropout, f.trunk_dropout));
    s.push_str("[train.teacher]               # also [train.joint], [train.student], [train.probe] (all required)\n");
    s.push_str("optimizer = \"adamw\"           # sgd | adam | adamw\nlearning_rate = 0.003         # (required)\nweight_decay = 0.0\n");
    s.push_str("batch_size = 64\naccumulation = 1\nmax_epochs = 30               # (required)\nmin_epochs = 20\npatience = 10\n\n");
    s.push_str("[variants]\n# excluded = 3                # cross-dataset: dataset left out of the joint teacher\n");
    s.push_str("# vary_m = 2                  # vary-m: datasets taking part\n# same_dataset = 1            # same-dataset-teacher: dataset every teacher trains on\n");
    s
}
