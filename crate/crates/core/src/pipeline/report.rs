//! Report tables assembled from the per-job records of a run directory.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::run::{csv_err, finished_jobs, read_done, read_test_curve, write_records, Record};
use crate::error::{IoContext, Result};

/// Mean and sample standard deviation of test acc@1 over replicates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub tap_set: String,
    /// A dataset name, or `all` for the per-replicate mean over datasets.
    pub dataset: String,
    pub replicates: usize,
    pub mean_acc1: f64,
    pub sd_acc1: f64,
    pub mean_acc5: f64,
}

/// Joint-teacher and student test acc@1 of one tap set on one dataset and replicate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub tap_set: String,
    pub dataset: String,
    pub replicate: u64,
    pub joint_acc1: f64,
    pub student_acc1: f64,
}

/// Every test record below `root`, sorted.
pub fn collect_records(root: &Path) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for dir in finished_jobs(root)? {
        out.extend(super::run::read_records(&dir.join("records.csv"))?);
    }
    out.sort_by_key(Record::sort_key);
    Ok(out)
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (mean, sd)
}

/// Per method, tap set and dataset; plus `all`, averaging the per-replicate
/// dataset means. Individual teachers are summarized per dataset only.
pub fn summarize(records: &[Record]) -> Vec<SummaryRow> {
    type Key = (String, String, String);
    let mut cells: BTreeMap<Key, Vec<(u64, f64, f64)>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.split == "test") {
        cells.entry((r.method.clone(), r.tap_set.clone(), r.dataset.clone())).or_default().push((r.replicate, r.acc1, r.acc5));
    }
    let mut rows = Vec::new();
    let mut per_rep: BTreeMap<(String, String), BTreeMap<u64, Vec<(f64, f64)>>> = BTreeMap::new();
    for ((method, tap, dataset), v) in &cells {
        let (mean, sd) = mean_sd(&v.iter().map(|c| c.1).collect::<Vec<_>>());
        let (m5, _) = mean_sd(&v.iter().map(|c| c.2).collect::<Vec<_>>());
        rows.push(SummaryRow { method: method.clone(), tap_set: tap.clone(), dataset: dataset.clone(), replicates: v.len(), mean_acc1: mean, sd_acc1: sd, mean_acc5: m5 });
        for &(rep, a1, a5) in v {
            per_rep.entry((method.clone(), tap.clone())).or_default().entry(rep).or_default().push((a1, a5));
        }
    }
    for ((method, tap), reps) in per_rep {
        let means: Vec<(f64, f64)> = reps.values().map(|v| (mean_sd(&v.iter().map(|c| c.0).collect::<Vec<_>>()).0, mean_sd(&v.iter().map(|c| c.1).collect::<Vec<_>>()).0)).collect();
        let (mean, sd) = mean_sd(&means.iter().map(|c| c.0).collect::<Vec<_>>());
        let (m5, _) = mean_sd(&means.iter().map(|c| c.1).collect::<Vec<_>>());
        rows.push(SummaryRow { method, tap_set: tap, dataset: "all".into(), replicates: means.len(), mean_acc1: mean, sd_acc1: sd, mean_acc5: m5 });
    }
    rows
}

/// Pairs each joint-teacher record with the student record of the same
/// tap set, dataset and replicate.
pub fn ablation_rows(records: &[Record]) -> Result<Vec<AblationRow>> {
    let mut joint: BTreeMap<(String, String, u64), f64> = BTreeMap::new();
    let mut student = joint.clone();
    for r in records.iter().filter(|r| r.split == "test") {
        let key = (r.tap_set.clone(), r.dataset.clone(), r.replicate);
        match r.method.as_str() {
            "joint-teacher" => {
                joint.insert(key, r.acc1);
            }
            "mlfd" => {
                student.insert(key, r.acc1);
            }
            _ => {}
        }
    }
    Ok(joint
        .into_iter()
        .filter_map(|(k, j)| {
            student.get(&k).map(|&s| AblationRow { tap_set: k.0.clone(), dataset: k.1.clone(), replicate: k.2, joint_acc1: j, student_acc1: s })
        })
        .collect())
}

fn write_rows<T: Serialize>(p: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(p).map_err(|e| csv_err(p, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(p, e))?;
    }
    w.flush().at(p)
}

#[derive(Serialize)]
struct CurveRow<'a> {
    replicate: u64,
    method: &'a str,
    tap_set: &'a str,
    model: &'a str,
    dataset: String,
    epoch: usize,
    test_acc1: f64,
}

/// Writes `report.csv`, `summary.csv`, `curves.csv` and `ablation.csv` under `root`.
pub fn write_reports(root: &Path) -> Result<()> {
    let records = collect_records(root)?;
    write_records(&root.join("report.csv"), &records)?;
    write_rows(&root.join("summary.csv"), &summarize(&records))?;
    write_rows(&root.join("ablation.csv"), &ablation_rows(&records)?)?;
    let mut curves = Vec::new();
    let jobs = finished_jobs(root)?;
    let metas: Vec<_> = jobs.iter().map(|d| read_done(&d.join("done"))).collect::<Result<_>>()?;
    for (dir, done) in jobs.iter().zip(&metas) {
        let p = dir.join("metrics.csv");
        if !p.exists() {
            continue;
        }
        for (epoch, dataset, acc) in read_test_curve(&p)? {
            let m = &done.meta;
            curves.push(CurveRow { replicate: m.replicate, method: &m.method, tap_set: &m.tap_set, model: &m.model, dataset, epoch, test_acc1: acc });
        }
    }
    write_rows(&root.join("curves.csv"), &curves)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(method: &str, tap: &str, dataset: &str, rep: u64, acc1: f64) -> Record {
        Record {
            replicate: rep,
            method: method.into(),
            tap_set: tap.into(),
            model: "m".into(),
            dataset: dataset.into(),
            split: "test".into(),
            acc1,
            acc5: 100.0,
            k5: 5,
            best_epoch: 1,
            epochs_run: 1,
        }
    }

    #[test]
    fn summary_averages_datasets_within_a_replicate_first() {
        let rs = vec![rec("a", "-", "d1", 0, 50.0), rec("a", "-", "d2", 0, 70.0), rec("a", "-", "d1", 1, 70.0), rec("a", "-", "d2", 1, 90.0)];
        let s = summarize(&rs);
        let all = s.iter().find(|r| r.dataset == "all").unwrap();
        assert_eq!((all.replicates, all.mean_acc1), (2, 70.0));
        assert!((all.sd_acc1 - 200f64.sqrt()).abs() < 1e-12);
        let d1 = s.iter().find(|r| r.dataset == "d1").unwrap();
        assert_eq!(d1.mean_acc1, 60.0);
    }

    #[test]
    fn ablation_pairs_joint_with_student() {
        let rs = vec![rec("joint-teacher", "L1", "d1", 0, 80.0), rec("mlfd", "L1", "d1", 0, 75.0), rec("mlfd", "L2", "d1", 0, 70.0)];
        let a = ablation_rows(&rs).unwrap();
        assert_eq!(a, vec![AblationRow { tap_set: "L1".into(), dataset: "d1".into(), replicate: 0, joint_acc1: 80.0, student_acc1: 75.0 }]);
    }
}
