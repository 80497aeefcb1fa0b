//! End-to-end orchestration: individual teachers, the joint teacher,
//! students, the baselines, the tap-level sweep and the report tables.
//!
//! ```text
//! <out>/config.resolved.toml
//! <out>/data/<dataset>/
//! <out>/rep<r>/stage1/teacher_<k>/             checkpoint/, metrics.csv, records.csv, log.txt, done
//! <out>/rep<r>/stage2/<L>/joint/
//! <out>/rep<r>/stage2/<L>/probe_<dataset>/     cross-dataset variant only
//! <out>/rep<r>/stage3/<L>/student_<dataset>/
//! <out>/rep<r>/baselines/<method>[_<dataset>]/
//! <out>/report.csv, summary.csv, curves.csv, ablation.csv
//! ```

mod baselines;
mod config;
mod methods;
pub mod report;
mod run;
mod stages;

pub use baselines::{merge_union, MultiHeadNet, MultiHeadObjective, MultiHeadSpec};
pub use config::{
    apply_override, config_hash, config_reference, DataConfig, ExperimentConfig, ModelChoice, ResolvedConfig, TrainSection, Variant,
    VariantOptions, METHODS,
};
pub use methods::{method, method_names, TrainingMethod};
pub use report::{ablation_rows, summarize, write_reports, AblationRow, SummaryRow};
pub use run::{finished_jobs, read_done, read_records, read_test_curve, Done, JobDir, JobMeta, Record, RunDir};
pub use stages::{
    load_teachers,
    build_teacher_caches, extract_targets, load_joint, load_student, run_stage1, run_stage2, run_stage3, JointOut, StudentOut,
};

use std::path::{Path, PathBuf};

use mlfd_numerics::rng;

use crate::data::{gen_synthetic_family, load_dataset, save_dataset, LabeledDataset};
use crate::error::{Error, IoContext, Result};
use crate::fusion::EmbeddingCache;

/// Environment variable overriding the embedding-cache root.
pub const CACHE_ENV: &str = "MLFD_CACHE_DIR";

/// A resolved config bound to a locked run directory and its datasets.
#[derive(Debug)]
pub struct Experiment {
    pub resolved: ResolvedConfig,
    pub run: RunDir,
    pub cache: EmbeddingCache,
    pub datasets: Vec<LabeledDataset>,
    data_hashes: Vec<String>,
    /// Worker threads for independent jobs within a stage.
    pub jobs: usize,
    pub quiet: bool,
}

/// Who trains on what, derived from the variant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Plan {
    /// `(dataset index, teacher config index)` per individual teacher.
    pub teachers: Vec<(usize, usize)>,
    /// Datasets with a head in the joint teacher; empty without fusion.
    pub joint: Vec<usize>,
    /// Datasets that get a student (and the baselines).
    pub students: Vec<usize>,
    /// Dataset left out of the joint teacher that still gets a student.
    pub probe: Option<usize>,
}

impl Plan {
    pub fn fused(&self) -> bool {
        !self.joint.is_empty()
    }

    /// Datasets whose teacher embeddings the cache must hold.
    pub fn embedded(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.joint.iter().chain(&self.probe).copied().collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Index of the teacher whose targets a student of dataset `d` uses without fusion.
    pub fn own_teacher(&self, d: usize) -> Option<usize> {
        self.teachers.iter().position(|(td, _)| *td == d)
    }
}

impl Experiment {
    pub fn open(resolved: ResolvedConfig, out: &Path, jobs: usize) -> Result<Experiment> {
        let run = RunDir::open(out)?;
        let cache_root = std::env::var_os(CACHE_ENV).map(PathBuf::from).unwrap_or_else(|| out.join("cache"));
        let p = out.join("config.resolved.toml");
        std::fs::write(&p, resolved.frozen_copy()).at(&p)?;
        let datasets = prepare_data(&resolved.config, &out.join("data"))?;
        let data_hashes = datasets.iter().map(|d| d.content_hash()).collect();
        Ok(Experiment { resolved, run, cache: EmbeddingCache::open(cache_root), datasets, data_hashes, jobs: jobs.max(1), quiet: false })
    }

    pub fn cfg(&self) -> &ExperimentConfig {
        &self.resolved.config
    }

    pub fn data_hash(&self, d: usize) -> &str {
        &self.data_hashes[d]
    }

    pub fn plan(&self) -> Plan {
        let cfg = self.cfg();
        let m = self.datasets.len();
        let all: Vec<usize> = (0..m).collect();
        match cfg.variant {
            Variant::Standard => Plan { teachers: all.iter().map(|&d| (d, d)).collect(), joint: all.clone(), students: all, probe: None },
            Variant::SameArch => Plan { teachers: all.iter().map(|&d| (d, 0)).collect(), joint: all.clone(), students: all, probe: None },
            Variant::SameDatasetTeacher => {
                let s = cfg.variants.same_dataset.unwrap_or(1) - 1;
                Plan { teachers: (0..m).map(|k| (s, k)).collect(), joint: vec![s], students: vec![s], probe: None }
            }
            Variant::CrossDataset => {
                let e = cfg.variants.excluded.unwrap_or(m) - 1;
                let rest: Vec<usize> = all.iter().copied().filter(|&d| d != e).collect();
                Plan { teachers: rest.iter().map(|&d| (d, d)).collect(), joint: rest, students: all, probe: Some(e) }
            }
            Variant::SingleDatasetKd => Plan { teachers: all.iter().map(|&d| (d, d)).collect(), joint: Vec::new(), students: all, probe: None },
            Variant::VaryM => {
                let v: Vec<usize> = (0..cfg.variants.vary_m.unwrap_or(m)).collect();
                Plan { teachers: v.iter().map(|&d| (d, d)).collect(), joint: v.clone(), students: v, probe: None }
            }
        }
    }

    /// Seed of replicate `rep`.
    pub fn rep_seed(&self, rep: u64) -> u64 {
        rng::derive(self.cfg().master_seed, &[rep])
    }

    /// Seed of a named job within replicate `rep`.
    pub fn job_seed(&self, rep: u64, job: &str) -> u64 {
        rng::derive_named(self.rep_seed(rep), job)
    }

    pub fn progress(&self, msg: &str) {
        if !self.quiet {
            eprintln!("[{}] {msg}", self.cfg().name);
        }
    }

    pub fn dataset_index(&self, name: &str) -> Result<usize> {
        self.datasets
            .iter()
            .position(|d| d.name == name)
            .ok_or_else(|| Error::Config(format!("unknown dataset '{name}'")))
    }

    /// Runs `f` over `items` on up to `self.jobs` threads, keeping input order.
    pub fn par_map<T: Sync, R: Send>(&self, items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
        if self.jobs <= 1 || items.len() <= 1 {
            return items.iter().map(&f).collect();
        }
        let chunk = items.len().div_ceil(self.jobs);
        std::thread::scope(|s| {
            let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<R>>>())).collect();
            let mut out = Vec::with_capacity(items.len());
            for h in handles {
                out.extend(h.join().expect("worker panicked")?);
            }
            Ok(out)
        })
    }

    /// Runs every configured method for every replicate, then writes the reports.
    pub fn run_all(&self) -> Result<Vec<Record>> {
        let mut records = Vec::new();
        for &rep in &self.cfg().seeds {
            for name in &self.cfg().methods {
                let m = method(name)?;
                self.progress(&format!("replicate {rep}: {name}"));
                records.extend(m.run(self, rep, &self.cfg().tap_set)?);
            }
        }
        write_reports(self.run.root())?;
        Ok(records)
    }

    /// Joint teacher and students for every tap set, sharing the individual teachers.
    pub fn ablate(&self) -> Result<Vec<AblationRow>> {
        if !self.plan().fused() {
            return Err(Error::Config(format!("variant {} has no joint teacher to sweep", self.cfg().variant.as_str())));
        }
        for &rep in &self.cfg().seeds {
            let teachers = run_stage1(self, rep)?;
            for tap in &self.cfg().ablation_tap_sets {
                self.progress(&format!("replicate {rep}: tap set {tap}"));
                let joint = run_stage2(self, rep, tap, &teachers, true)?;
                run_stage3(self, rep, tap, &teachers, Some(&joint))?;
            }
        }
        write_reports(self.run.root())?;
        ablation_rows(&report::collect_records(self.run.root())?)
    }
}

/// Datasets from `paths`, or the synthetic family generated (and saved
/// under `data_dir`, rewritten only when its content changed).
pub fn prepare_data(cfg: &ExperimentConfig, data_dir: &Path) -> Result<Vec<LabeledDataset>> {
    if !cfg.data.paths.is_empty() {
        return cfg.data.paths.iter().map(|p| load_dataset(p)).collect();
    }
    let mut family = cfg.data.family.clone().ok_or_else(|| Error::Config("data: give `paths` or a `family`".into()))?;
    family.seed = cfg.data.seed;
    let datasets = gen_synthetic_family(&family)?;
    for d in &datasets {
        let dir = data_dir.join(&d.name);
        let same = dir.join("manifest").exists() && load_dataset(&dir).is_ok_and(|old| old.content_hash() == d.content_hash());
        if !same {
            save_dataset(d, &dir)?;
        }
    }
    Ok(datasets)
}
