//! Acceptance gate. Runs the bundled experiment end to end and prints one
//! PASS / FAIL line per primary criterion; exits non-zero if any fails.
//!
//! `MLFD_ACCEPTANCE_DIR` keeps the bundled run in a fixed directory so a
//! rerun reuses finished jobs (the runtime line is then not meaningful).

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use mlfd_core::data::Split;
use mlfd_core::distill::{kd_loss, KDConfig};
use mlfd_core::fusion::{cache_key, teacher_owner, EmbeddingCache, JointTeacher, Owner};
use mlfd_core::models::Model;
use mlfd_core::pipeline::{read_done, read_records, run_stage1, run_stage2, AblationRow, Experiment, Record, ResolvedConfig};
use mlfd_core::train::accuracy;
use mlfd_core::Error;
use mlfd_numerics::gradcheck::{max_rel_error, numeric_grads, primitive_suite, FD_REL_TOL, FD_STEP};
use mlfd_numerics::{cross_entropy, rng, softmax_with_temperature, Tape, Tensor};
use rand::Rng;

/// Minimum mean paired gap (student minus dataset-specific, acc@1 points),
/// fixed before the gate run by a 5-replicate pilot under `master_seed = 1000`:
/// the pilot's mean paired gap minus its standard deviation, floored at 0.
/// Pilot gaps were -0.47, -0.33, -1.20, +3.00, +1.87 (mean +0.57, sd 1.78).
const CENTRAL_THRESHOLD: f64 = 0.0;
const RUN_BUDGET_S: f64 = 30.0 * 60.0;
const GRADIENT_BUDGET_S: f64 = 120.0;
const CASES: u64 = 20;
const DATASETS: [&str; 3] = ["d1", "d2", "d3"];
/// Tap set of the bundled config; ablation records at other tap sets are left out of the comparisons.
const TAP: &str = "L2";

/// Reduced bundled experiment for the checks that need fresh runs.
const SMALL: &[&str] = &[
    "seeds=[0]",
    "data.family.train_size=300",
    "data.family.test_size=100",
    "train.teacher.max_epochs=2",
    "train.teacher.min_epochs=2",
    "train.joint.max_epochs=2",
    "train.joint.min_epochs=2",
    "train.student.max_epochs=2",
    "train.student.min_epochs=2",
];

#[derive(Clone, Copy, PartialEq)]
enum Verdict {
    Pass,
    Fail,
    /// Inside the noise band of a report-only comparison.
    Report,
}

struct Gate {
    failed: bool,
}

impl Gate {
    fn line(&mut self, name: &str, v: Verdict, detail: String) {
        let tag = match v {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Report => "PASS (report-only)",
        };
        self.failed |= v == Verdict::Fail;
        println!("{tag} {name}: {detail}");
    }

    fn check(&mut self, name: &str, f: impl FnOnce() -> anyhow::Result<(bool, String)>) {
        match f() {
            Ok((ok, detail)) => self.line(name, if ok { Verdict::Pass } else { Verdict::Fail }, detail),
            Err(e) => self.line(name, Verdict::Fail, format!("error: {e:#}")),
        }
    }
}

fn bundled() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/bundled.toml")
}

fn mlfd(out: &Path, extra: &[&str], args: &[&str]) -> anyhow::Result<f64> {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mlfd"));
    c.arg("--config").arg(bundled()).arg("--out").arg(out).arg("--quiet").env_remove("MLFD_CACHE_DIR");
    for s in extra {
        c.arg("--set").arg(s);
    }
    let t = Instant::now();
    let o = c.args(args).output()?;
    anyhow::ensure!(o.status.success(), "mlfd {args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    Ok(t.elapsed().as_secs_f64())
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 { (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (m, sd)
}

/// Per-replicate mean test acc@1 over datasets of one method.
fn per_replicate(records: &[Record], method: &str) -> BTreeMap<u64, f64> {
    let mut by: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.method == method && r.split == "test" && (r.tap_set == "-" || r.tap_set == TAP)) {
        by.entry(r.replicate).or_default().push(r.acc1);
    }
    by.into_iter().map(|(k, v)| (k, mean_sd(&v).0)).collect()
}

struct KdCase {
    logits: Tensor,
    one_hot: Tensor,
    student: Vec<Tensor>,
    probs: Tensor,
    teacher: Vec<Tensor>,
}

fn randn(shape: &[usize], r: &mut rng::Rng) -> Tensor {
    let n = shape.iter().product();
    // Box-Muller keeps this free of a distribution crate
    let data = (0..n)
        .map(|_| {
            let (u, v): (f64, f64) = (r.gen::<f64>().max(1e-12), r.gen());
            (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn kd_case(seed: u64) -> KdCase {
    let mut r = rng::rng(seed);
    let (b, c) = (r.gen_range(2..=5), r.gen_range(3..=8));
    let shapes = [vec![b, r.gen_range(1..=3), 2, 2], vec![b, r.gen_range(2..=6)]];
    let mut one_hot = Tensor::zeros(&[b, c]);
    for i in 0..b {
        let y = r.gen_range(0..c);
        one_hot.data_mut()[i * c + y] = 1.0;
    }
    KdCase {
        logits: randn(&[b, c], &mut r),
        one_hot,
        student: shapes.iter().map(|s| randn(s, &mut r)).collect(),
        probs: softmax_with_temperature(&randn(&[b, c], &mut r), 1.0).unwrap(),
        teacher: shapes.iter().map(|s| randn(s, &mut r)).collect(),
    }
}

fn kd_value(c: &KdCase, logits: &Tensor, student: &[Tensor], cfg: &KDConfig) -> f64 {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let s: Vec<_> = student.iter().map(|e| tape.constant(e.clone())).collect();
    let (total, _) = kd_loss(&mut tape, l, &c.one_hot, &s, &c.probs, &c.teacher, cfg).expect("kd_loss evaluates");
    tape.value(total).item()
}

fn gradient_suite() -> anyhow::Result<(bool, String)> {
    let t = Instant::now();
    let prims = primitive_suite(CASES);
    let cfg = KDConfig::default();
    let mut composite: f64 = 0.0;
    for seed in 0..CASES {
        let c = kd_case(9000 + seed);
        let mut inputs = vec![c.logits.clone()];
        inputs.extend(c.student.iter().cloned());
        let mut tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone().with_grad())).collect();
        let (total, _) = kd_loss(&mut tape, vars[0], &c.one_hot, &vars[1..], &c.probs, &c.teacher, &cfg)?;
        tape.backward(total)?;
        let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(&[0]))).collect();
        let numeric = numeric_grads(&inputs, FD_STEP, |xs| Ok(kd_value(&c, &xs[0], &xs[1..], &cfg)))?;
        composite = composite.max(max_rel_error(&analytic, &numeric, 1e-5));
    }
    let secs = t.elapsed().as_secs_f64();
    let worst = prims.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).expect("primitives");
    let ok = prims.iter().all(|p| p.failure.is_none() && p.cases as u64 >= CASES && p.max_rel_error < FD_REL_TOL) && composite < FD_REL_TOL && secs < GRADIENT_BUDGET_S;
    Ok((
        ok,
        format!(
            "{} primitives x {CASES} cases, worst {} {:.1e}; composite loss {:.1e} (tol {FD_REL_TOL:.0e}); {secs:.1}s (budget {GRADIENT_BUDGET_S}s)",
            prims.len(),
            worst.primitive,
            worst.max_rel_error,
            composite
        ),
    ))
}

fn checkpoint_params(dir: &Path) -> anyhow::Result<Vec<(String, Vec<u8>)>> {
    let mut files = Vec::new();
    for e in std::fs::read_dir(dir.join("checkpoint/params"))? {
        let p = e?.path();
        files.push((p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p)?));
    }
    files.sort();
    Ok(files)
}

fn degeneracy(scratch: &Path) -> anyhow::Result<(bool, String)> {
    let zero = KDConfig { alpha: 0.0, betas: vec![0.0, 0.0], tau: 2.0 };
    let mut worst: f64 = 0.0;
    for seed in 0..CASES {
        let c = kd_case(7000 + seed);
        let total = kd_value(&c, &c.logits, &c.student, &zero);
        let hard = cross_entropy(&softmax_with_temperature(&c.logits, 1.0)?, &c.one_hot)?;
        worst = worst.max((total - hard).abs());
    }
    let out = scratch.join("degenerate");
    let mut extra = SMALL.to_vec();
    extra.extend(["kd.alpha=0", "kd.betas=[0.0, 0.0]", "methods=[\"dataset-specific\", \"mlfd\"]"]);
    mlfd(&out, &extra, &["run-all"])?;
    let mut identical = 0;
    for d in DATASETS {
        let s = checkpoint_params(&out.join(format!("rep0/stage3/L2/student_{d}")))?;
        let b = checkpoint_params(&out.join(format!("rep0/baselines/dataset-specific_{d}")))?;
        identical += (!s.is_empty() && s == b) as usize;
    }
    let recs = read_records(&out.join("report.csv"))?;
    let same_acc = per_replicate(&recs, "mlfd") == per_replicate(&recs, "dataset-specific");
    Ok((
        worst <= 1e-12 && identical == 3 && same_acc,
        format!("|kd - ce| max {worst:.1e} over {CASES} cases (tol 1e-12); {identical}/3 students bitwise equal to their baselines; accuracies equal: {same_acc}"),
    ))
}

fn frozen(scratch: &Path, run: &Path) -> anyhow::Result<(bool, String)> {
    // in memory: full joint training next to the very teacher objects
    let o: Vec<String> = SMALL.iter().map(|s| s.to_string()).collect();
    let text = std::fs::read_to_string(bundled())?;
    let mut x = Experiment::open(ResolvedConfig::parse(&text, &o)?, &scratch.join("frozen"), 1)?;
    x.quiet = true;
    let teachers = run_stage1(&x, 0)?;
    let before: Vec<_> = teachers.iter().map(|t| t.store.clone()).collect();
    let joint = run_stage2(&x, 0, "L2", &teachers, true)?;
    let unchanged = teachers.iter().zip(&before).all(|(t, b)| t.store.bit_eq(b));
    let joint_moved = joint.joint.fingerprint() != JointTeacher::build(joint.joint.spec.clone(), 0)?.fingerprint();

    // on disk: every joint teacher of the bundled run names its teachers' stage-1 weights
    let mut matched = 0;
    let mut total = 0;
    for rep in 0..5 {
        let jt = JointTeacher::load(&run.join(format!("rep{rep}/stage2/L2/joint/checkpoint")))?;
        for (k, r) in jt.spec.teachers.iter().enumerate() {
            let dir = run.join(format!("rep{rep}/stage1/teacher_{}", k + 1));
            let m = Model::load(&dir.join("checkpoint"), None)?;
            let done = read_done(&dir.join("done"))?;
            total += 1;
            matched += (m.fingerprint() == r.fingerprint && done.fingerprint == r.fingerprint) as usize;
        }
    }
    Ok((
        unchanged && joint_moved && matched == total,
        format!("teacher parameters bitwise unchanged by joint training: {unchanged} (joint moved: {joint_moved}); {matched}/{total} bundled joint teachers reference unchanged stage-1 weights"),
    ))
}

fn cache_integrity(scratch: &Path, run: &Path) -> anyhow::Result<(bool, String)> {
    let cache = EmbeddingCache::open(run.join("cache"));
    let text = std::fs::read_to_string(bundled())?;
    let cfg = ResolvedConfig::parse(&text, &[])?.config;
    let datasets = mlfd_core::pipeline::prepare_data(&cfg, &scratch.join("data"))?;
    let mut recomputed = 0;
    let mut rows = 0;
    for k in 0..3 {
        let t = Model::load(&run.join(format!("rep0/stage1/teacher_{}/checkpoint", k + 1)), None)?;
        let entry = cache.existing(&cache_key(&t.spec_hash(), &format!("rep0/teacher_{}", k + 1)), teacher_owner(&t))?;
        for d in &datasets {
            let cached = entry.read_all(&d.name, "stage3", d.len())?;
            let fresh = t.infer(&d.inputs, &["stage3".to_string()])?.1.remove("stage3").expect("level");
            recomputed += cached.bit_eq(&fresh) as usize;
            rows += cached.shape()[0];
        }
    }

    let scratch_cache = EmbeddingCache::open(scratch.join("cache"));
    let owner = Owner { spec_hash: "spec".into(), fingerprint: "weights".into() };
    let entry = scratch_cache.entry("roundtrip", owner.clone())?;
    let mut r = rng::rng(5);
    let values = randn(&[700, 3, 2, 2], &mut r);
    let samples: Vec<usize> = (0..700).rev().collect();
    entry.write("d", Split::Train, "stage3", &samples, &values)?;
    let (s, v) = entry.read("d", Split::Train, "stage3")?;
    let round_trip = s == samples && v.bit_eq(&values);
    let stale = matches!(scratch_cache.entry("roundtrip", Owner { fingerprint: "retrained".into(), ..owner }), Err(Error::StaleCache(_)));
    Ok((
        recomputed == 9 && round_trip && stale,
        format!("{recomputed}/9 cached teacher embeddings ({rows} rows) equal a fresh eval forward bitwise; sharded round trip bitwise: {round_trip}; stale owner refused: {stale}"),
    ))
}

fn central(records: &[Record], run_secs: f64) -> (bool, String) {
    let (s, b) = (per_replicate(records, "mlfd"), per_replicate(records, "dataset-specific"));
    let gaps: Vec<f64> = s.iter().filter_map(|(k, v)| b.get(k).map(|w| v - w)).collect();
    let (gap, sd) = mean_sd(&gaps);
    let ok = gaps.len() == 5 && gap >= CENTRAL_THRESHOLD && run_secs < RUN_BUDGET_S;
    let student = mean_sd(&s.values().copied().collect::<Vec<_>>()).0;
    let base = mean_sd(&b.values().copied().collect::<Vec<_>>()).0;
    (
        ok,
        format!(
            "student {student:.2} vs dataset-specific {base:.2} acc@1 over {} seeds; mean paired gap {gap:+.2} (sd {sd:.2}), threshold {CENTRAL_THRESHOLD:.2}; run-all {:.0}s (budget {:.0}s)",
            gaps.len(),
            run_secs,
            RUN_BUDGET_S
        ),
    )
}

fn ordering(records: &[Record], gate: &mut Gate) {
    let stats = |m: &str| mean_sd(&per_replicate(records, m).values().copied().collect::<Vec<_>>());
    let (s, ssd) = stats("mlfd");
    let mut verdict = Verdict::Pass;
    let mut parts = Vec::new();
    for other in ["multi-head", "joint-head"] {
        let (o, osd) = stats(other);
        let pooled = ((ssd * ssd + osd * osd) / 2.0).sqrt();
        let v = if s > o {
            Verdict::Pass
        } else if o - s <= pooled {
            Verdict::Report
        } else {
            Verdict::Fail
        };
        if v == Verdict::Fail || (v == Verdict::Report && verdict == Verdict::Pass) {
            verdict = v;
        }
        parts.push(format!("{other} {o:.2} (pooled sd {pooled:.2})"));
    }
    gate.line("baseline ordering", verdict, format!("student {s:.2} vs {}", parts.join(", ")));
}

fn ablation(rows: &[AblationRow], gate: &mut Gate) {
    let mean = |tap: &str, f: fn(&AblationRow) -> f64| {
        let v: Vec<f64> = rows.iter().filter(|r| r.tap_set == tap).map(f).collect();
        (mean_sd(&v).0, v.len())
    };
    let (j1, n1) = mean("L1", |r| r.joint_acc1);
    let (j2, n2) = mean("L2", |r| r.joint_acc1);
    let (j4, n4) = mean("L4", |r| r.joint_acc1);
    let ok = n1 == 15 && n2 == 15 && n4 == 15 && j1 > j4 && j2 > j4;
    gate.line(
        "ablation shape",
        if ok { Verdict::Pass } else { Verdict::Fail },
        format!("joint-teacher acc@1 L1 {j1:.2}, L2 {j2:.2}, L4 {j4:.2} ({n1}/{n2}/{n4} cells)"),
    );
    let (s1, _) = mean("L1", |r| r.student_acc1);
    let (s2, _) = mean("L2", |r| r.student_acc1);
    let wins = DATASETS
        .iter()
        .filter(|d| {
            let m = |tap: &str| mean_sd(&rows.iter().filter(|r| r.tap_set == tap && r.dataset == **d).map(|r| r.student_acc1).collect::<Vec<_>>()).0;
            m("L2") > m("L1")
        })
        .count();
    println!("  note: student acc@1 L2 {s2:.2} vs L1 {s1:.2}; L2 ahead on {wins}/3 datasets");
}

fn determinism(scratch: &Path) -> anyhow::Result<(bool, String)> {
    let (a, b) = (scratch.join("det_a"), scratch.join("det_b"));
    mlfd(&a, SMALL, &["run-all"])?;
    mlfd(&b, SMALL, &["--jobs", "3", "run-all"])?;
    let (ra, rb) = (std::fs::read(a.join("report.csv"))?, std::fs::read(b.join("report.csv"))?);
    let n = read_records(&a.join("report.csv"))?.len();
    Ok((ra == rb && n > 0, format!("two reduced runs (1 and 3 worker threads), {n} records each: report.csv identical: {}", ra == rb)))
}

fn metric_sanity(records: &[Record]) -> (bool, String) {
    let bad = records.iter().filter(|r| !(0.0 <= r.acc1 && r.acc1 <= r.acc5 && r.acc5 <= 100.0)).count();
    let (classes, n) = (8, 500);
    let mut acc = Vec::new();
    for seed in 0..5 {
        let mut r = rng::rng(40 + seed);
        let scores = randn(&[n, classes], &mut r);
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..classes)).collect();
        acc.push(accuracy(&scores, &labels, 0).acc1);
    }
    let (mean, _) = mean_sd(&acc);
    (
        bad == 0 && !records.is_empty() && (mean - 12.5).abs() <= 2.0,
        format!("{} records, {bad} outside 0 <= acc@1 <= acc@5 <= 100; random logits acc@1 {mean:.2} vs 12.50 (C=8, n=500, 5 seeds, tol 2)", records.len()),
    )
}

fn main() -> anyhow::Result<()> {
    let scratch = tempfile::tempdir()?;
    let keep = std::env::var_os("MLFD_ACCEPTANCE_DIR").map(PathBuf::from);
    let run = keep.clone().unwrap_or_else(|| scratch.path().join("bundled"));
    let mut gate = Gate { failed: false };

    gate.check("gradient suite", gradient_suite);
    gate.check("loss degeneracy", || degeneracy(scratch.path()));

    eprintln!("acceptance: bundled run-all in {} (this takes a while)", run.display());
    let run_secs = match mlfd(&run, &[], &["run-all"]) {
        Ok(s) => s,
        Err(e) => {
            println!("FAIL bundled run-all: {e:#}");
            std::process::exit(1);
        }
    };
    let ablate_secs = mlfd(&run, &[], &["ablate"]);
    let records = read_records(&run.join("report.csv"))?;

    gate.check("frozen backbones", || frozen(scratch.path(), &run));
    gate.check("cache integrity", || cache_integrity(scratch.path(), &run));
    let (ok, detail) = central(&records, run_secs);
    gate.line("central claim", if ok { Verdict::Pass } else { Verdict::Fail }, detail);
    ordering(&records, &mut gate);
    match ablate_secs {
        Ok(s) => {
            let rows: Vec<AblationRow> = csv::Reader::from_path(run.join("ablation.csv"))?.deserialize().collect::<Result<_, _>>()?;
            println!("  note: ablate took {s:.0}s");
            ablation(&rows, &mut gate);
        }
        Err(e) => gate.line("ablation shape", Verdict::Fail, format!("error: {e:#}")),
    }
    gate.check("determinism", || determinism(scratch.path()));
    let all = read_records(&run.join("report.csv"))?;
    let (ok, detail) = metric_sanity(&all);
    gate.line("metric sanity", if ok { Verdict::Pass } else { Verdict::Fail }, detail);

    if gate.failed {
        std::process::exit(1);
    }
    Ok(())
}
