//! Run-directory bookkeeping: the writer lock, per-job directories with
//! their completion markers, training logs and metric records.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, IoContext, Result};
use crate::train::{Accuracy, TrainLog};

/// Exclusive writer handle on a run directory; the lock file goes away on drop.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    pub fn open(root: &Path) -> Result<RunDir> {
        fs::create_dir_all(root).at(root)?;
        let lock = root.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(Error::Precondition(format!(
                    "{} is locked by another writer (remove {} if that process is gone)",
                    root.display(),
                    lock.display()
                )));
            }
            Err(e) => return Err(Error::Io { path: lock, source: e }),
        }
        Ok(RunDir { root: root.to_path_buf(), lock })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn job(&self, rel: &str) -> JobDir {
        JobDir { dir: self.root.join(rel), rel: rel.to_string() }
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

/// Identifies a trained model inside the report tables.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobMeta {
    pub replicate: u64,
    pub method: String,
    /// Tap set, or "-" where levels do not apply.
    pub tap_set: String,
    pub model: String,
}

/// Completion marker: written last, so its presence means the job finished.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Done {
    pub input_hash: String,
    pub fingerprint: String,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub skipped_training: bool,
    pub meta: JobMeta,
}

#[derive(Clone, Debug)]
pub struct JobDir {
    pub dir: PathBuf,
    pub rel: String,
}

impl JobDir {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// The completion marker, if the job finished with the same inputs.
    pub fn done(&self, input_hash: &str) -> Result<Option<Done>> {
        let p = self.path("done");
        if !p.exists() {
            return Ok(None);
        }
        let d = read_done(&p)?;
        Ok((d.input_hash == input_hash).then_some(d))
    }

    /// Clears a previous, incomplete or outdated attempt.
    pub fn reset(&self) -> Result<()> {
        if self.dir.exists() {
            fs::remove_dir_all(&self.dir).at(&self.dir)?;
        }
        fs::create_dir_all(&self.dir).at(&self.dir)
    }

    pub fn log(&self, line: &str) -> Result<()> {
        fs::create_dir_all(&self.dir).at(&self.dir)?;
        let p = self.path("log.txt");
        let mut f = OpenOptions::new().create(true).append(true).open(&p).at(&p)?;
        writeln!(f, "{line}").at(&p)
    }

    pub fn finish(&self, done: &Done, log: Option<&TrainLog>, task_names: &[String], records: &[Record]) -> Result<()> {
        if let Some(l) = log {
            write_train_log(&self.path("metrics.csv"), l, task_names)?;
        }
        write_records(&self.path("records.csv"), records)?;
        let p = self.path("done");
        fs::write(&p, toml::to_string(done).expect("done marker serializes")).at(&p)
    }

    pub fn records(&self) -> Result<Vec<Record>> {
        read_records(&self.path("records.csv"))
    }
}

pub fn read_done(p: &Path) -> Result<Done> {
    let text = fs::read_to_string(p).at(p)?;
    toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))
}

/// One evaluation of one model on one dataset split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub replicate: u64,
    pub method: String,
    pub tap_set: String,
    pub model: String,
    pub dataset: String,
    pub split: String,
    pub acc1: f64,
    pub acc5: f64,
    /// k used for acc@5 (below 5 when the dataset has fewer classes).
    pub k5: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

impl Record {
    pub fn new(meta: &JobMeta, dataset: &str, split: Split, acc: Accuracy, done: &Done) -> Record {
        Record {
            replicate: meta.replicate,
            method: meta.method.clone(),
            tap_set: meta.tap_set.clone(),
            model: meta.model.clone(),
            dataset: dataset.to_string(),
            split: split.as_str().to_string(),
            acc1: acc.acc1,
            acc5: acc.acc5,
            k5: acc.k5,
            best_epoch: done.best_epoch,
            epochs_run: done.epochs_run,
        }
    }

    pub fn sort_key(&self) -> (u64, String, String, String, String, String) {
        (self.replicate, self.method.clone(), self.tap_set.clone(), self.model.clone(), self.dataset.clone(), self.split.clone())
    }
}

pub fn write_records(p: &Path, records: &[Record]) -> Result<()> {
    let mut w = csv::Writer::from_path(p).map_err(|e| csv_err(p, e))?;
    if records.is_empty() {
        w.write_record(RECORD_HEADER).map_err(|e| csv_err(p, e))?;
    }
    for r in records {
        w.serialize(r).map_err(|e| csv_err(p, e))?;
    }
    w.flush().at(p)
}

const RECORD_HEADER: [&str; 11] = ["replicate", "method", "tap_set", "model", "dataset", "split", "acc1", "acc5", "k5", "best_epoch", "epochs_run"];

pub fn read_records(p: &Path) -> Result<Vec<Record>> {
    let mut r = csv::Reader::from_path(p).map_err(|e| csv_err(p, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(p, e))).collect()
}

pub(crate) fn csv_err(p: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", p.display()))
}

/// Per-epoch rows: `epoch,dataset,split,loss_*...,acc1,acc5`.
pub fn write_train_log(p: &Path, log: &TrainLog, task_names: &[String]) -> Result<()> {
    let loss_names: Vec<String> = log.rows.iter().find(|r| r.split == Split::Train).map_or(Vec::new(), |r| r.losses.iter().map(|(k, _)| k.clone()).collect());
    let mut w = csv::Writer::from_path(p).map_err(|e| csv_err(p, e))?;
    let mut header = vec!["epoch".to_string(), "dataset".into(), "split".into()];
    header.extend(loss_names.iter().map(|n| format!("loss_{n}")));
    header.extend(["acc1".to_string(), "acc5".into()]);
    w.write_record(&header).map_err(|e| csv_err(p, e))?;
    for r in &log.rows {
        let mut row = vec![r.epoch.to_string(), task_names.get(r.task).cloned().unwrap_or_else(|| r.task.to_string()), r.split.as_str().to_string()];
        for n in &loss_names {
            row.push(r.losses.iter().find(|(k, _)| k == n).map_or(String::new(), |(_, v)| format!("{v}")));
        }
        match r.acc {
            Some(a) => row.extend([format!("{}", a.acc1), format!("{}", a.acc5)]),
            None => row.extend([String::new(), String::new()]),
        }
        w.write_record(&row).map_err(|e| csv_err(p, e))?;
    }
    w.flush().at(p)
}

/// `(epoch, dataset, test acc@1)` rows from a job's `metrics.csv`.
pub fn read_test_curve(p: &Path) -> Result<Vec<(usize, String, f64)>> {
    let mut r = csv::Reader::from_path(p).map_err(|e| csv_err(p, e))?;
    let headers = r.headers().map_err(|e| csv_err(p, e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| Error::Format(format!("{}: no column {name}", p.display())));
    let (ce, cd, cs, ca) = (col("epoch")?, col("dataset")?, col("split")?, col("acc1")?);
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| csv_err(p, e))?;
        if &row[cs] != "test" {
            continue;
        }
        let bad = || Error::Format(format!("{}: bad row", p.display()));
        out.push((row[ce].parse().map_err(|_| bad())?, row[cd].to_string(), row[ca].parse().map_err(|_| bad())?));
    }
    Ok(out)
}

/// Every job directory (one holding a `done` marker) below `root`, sorted.
pub fn finished_jobs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        if d.join("done").is_file() {
            out.push(d.clone());
        }
        for e in fs::read_dir(&d).at(&d)? {
            let e = e.at(&d)?;
            let p = e.path();
            // the embedding cache and dataset copies hold no jobs
            if p.is_dir() && !matches!(p.file_name().and_then(|n| n.to_str()), Some("cache" | "data" | "embeddings")) {
                stack.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}
