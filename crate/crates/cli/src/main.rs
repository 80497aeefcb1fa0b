use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mlfd_core::data::Split;
use mlfd_core::models::{tap_set_levels, Model};
use mlfd_core::pipeline::{
    build_teacher_caches, config_reference, extract_targets, load_teachers, method, read_records, run_stage1, run_stage2, run_stage3,
    write_reports, Experiment, Record, ResolvedConfig, RunDir, SummaryRow, METHODS,
};
use mlfd_core::train::accuracy;
use mlfd_core::ErrorClass;

const BUNDLED: &str = include_str!("../configs/bundled.toml");

#[derive(Parser)]
#[command(name = "mlfd", version, about = "Multi-dataset teachers fused into one joint teacher, distilled into small students")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults to the bundled three-dataset config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.student.max_epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run a single replicate with this id instead of the configured seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory (default: runs/<name>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for independent jobs within a stage.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Suppress progress messages.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate (or load) the datasets into the run directory.
    GenData,
    /// Train the individual teachers.
    TrainTeacher,
    /// Precompute teacher embeddings at the fusion level of a tap set.
    BuildCache {
        #[arg(long)]
        tap: Option<String>,
        /// Replace cache entries written by a different teacher.
        #[arg(long)]
        rebuild_stale: bool,
    },
    /// Train the joint teacher on cached teacher embeddings.
    TrainJoint {
        #[arg(long)]
        tap: Option<String>,
    },
    /// Run the joint teacher over each student's training split.
    ExtractTargets {
        #[arg(long)]
        tap: Option<String>,
    },
    /// Train the students against extracted targets.
    Distill {
        #[arg(long)]
        tap: Option<String>,
    },
    /// Train baselines (all three unless `--method` is given).
    Baseline {
        #[arg(long)]
        method: Option<String>,
    },
    /// Re-evaluate finished single-dataset checkpoints on their test split.
    Eval {
        /// Only models whose name contains this.
        #[arg(long)]
        model: Option<String>,
    },
    /// Sweep the configured tap sets, sharing the individual teachers.
    Ablate,
    /// Every configured method for every replicate, then the reports.
    RunAll,
    /// Export eval-mode activations of one model, one file per sample.
    DumpEmbeddings {
        /// `teacher_<k>` or `student_<k>` (1-based).
        #[arg(long)]
        model: String,
        #[arg(long, default_value = "top")]
        level: String,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        tap: Option<String>,
    },
    /// Rebuild report.csv, summary.csv, curves.csv and ablation.csv.
    Report,
    /// Print every config key with its default.
    ConfigReference,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let class = e.chain().find_map(|c| c.downcast_ref::<mlfd_core::Error>()).map(|e| e.class());
    match class {
        Some(ErrorClass::Config) => 2,
        Some(ErrorClass::Precondition) => 3,
        Some(ErrorClass::Numeric) => 4,
        _ => 1,
    }
}

fn resolve(c: &Common) -> Result<ResolvedConfig> {
    let mut overrides = c.set.clone();
    if let Some(s) = c.seed {
        overrides.push(format!("seeds=[{s}]"));
    }
    Ok(match &c.config {
        Some(p) => ResolvedConfig::load(p, &overrides)?,
        None => ResolvedConfig::parse(BUNDLED, &overrides)?,
    })
}

fn out_dir(c: &Common, name: &str) -> PathBuf {
    c.out.clone().unwrap_or_else(|| Path::new("runs").join(name))
}

fn open(c: &Common) -> Result<Experiment> {
    let resolved = resolve(c)?;
    let out = out_dir(c, &resolved.config.name);
    let mut x = Experiment::open(resolved, &out, c.jobs)?;
    x.quiet = c.quiet;
    Ok(x)
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    match cli.cmd {
        Cmd::ConfigReference => {
            print!("{}", config_reference());
            Ok(())
        }
        Cmd::Report => {
            let name = resolve(c).map(|r| r.config.name).unwrap_or_else(|_| "bundled".into());
            let out = out_dir(c, &name);
            if !out.is_dir() {
                bail!(mlfd_core::Error::Precondition(format!("no run directory at {}", out.display())));
            }
            let _lock = RunDir::open(&out)?;
            write_reports(&out)?;
            print_summary(&out)
        }
        Cmd::GenData => {
            let x = open(c)?;
            for d in &x.datasets {
                let n = |s| d.splits.get(s).len();
                println!("{}: {} classes, input {:?}, {} train / {} val / {} test", d.name, d.classes, d.sample_shape(), n(Split::Train), n(Split::Val), n(Split::Test));
            }
            Ok(())
        }
        Cmd::TrainTeacher => {
            let x = open(c)?;
            for &rep in &x.cfg().seeds {
                run_stage1(&x, rep)?;
            }
            Ok(())
        }
        Cmd::BuildCache { tap, rebuild_stale } => {
            let x = open(c)?;
            let tap = tap.unwrap_or_else(|| x.cfg().tap_set.clone());
            let level = tap_set_levels(&tap)?.remove(0);
            for &rep in &x.cfg().seeds {
                let teachers = load_teachers(&x, rep)?;
                for e in build_teacher_caches(&x, rep, &teachers, &level, true, rebuild_stale)? {
                    println!("{}", e.dir().display());
                }
            }
            Ok(())
        }
        Cmd::TrainJoint { tap } => {
            let x = open(c)?;
            let tap = tap.unwrap_or_else(|| x.cfg().tap_set.clone());
            for &rep in &x.cfg().seeds {
                let teachers = load_teachers(&x, rep)?;
                run_stage2(&x, rep, &tap, &teachers, true)?;
            }
            Ok(())
        }
        Cmd::ExtractTargets { tap } => {
            let x = open(c)?;
            let tap = tap.unwrap_or_else(|| x.cfg().tap_set.clone());
            for &rep in &x.cfg().seeds {
                let teachers = load_teachers(&x, rep)?;
                let joint = if x.plan().fused() { Some(run_stage2(&x, rep, &tap, &teachers, false)?) } else { None };
                for d in x.plan().students {
                    let (t, _) = extract_targets(&x, rep, &tap, &teachers, joint.as_ref(), d)?;
                    println!("replicate {rep}: {} targets for {} at {}", t.samples.len(), t.dataset, t.levels.join(","));
                }
            }
            Ok(())
        }
        Cmd::Distill { tap } => {
            let x = open(c)?;
            let tap = tap.unwrap_or_else(|| x.cfg().tap_set.clone());
            for &rep in &x.cfg().seeds {
                let teachers = load_teachers(&x, rep)?;
                let joint = if x.plan().fused() { Some(run_stage2(&x, rep, &tap, &teachers, false)?) } else { None };
                run_stage3(&x, rep, &tap, &teachers, joint.as_ref())?;
            }
            write_reports(x.run.root())?;
            print_summary(x.run.root())
        }
        Cmd::Baseline { method: name } => {
            let x = open(c)?;
            let names: Vec<String> = match name {
                Some(n) => vec![n],
                None => METHODS.iter().filter(|m| **m != "mlfd").map(|m| m.to_string()).collect(),
            };
            for &rep in &x.cfg().seeds {
                for n in &names {
                    let m = method(n)?;
                    if m.name() == "mlfd" {
                        bail!(mlfd_core::Error::Config("mlfd is not a baseline; use run-all or distill".into()));
                    }
                    m.run(&x, rep, "-")?;
                }
            }
            write_reports(x.run.root())?;
            print_summary(x.run.root())
        }
        Cmd::Eval { model } => eval(c, model.as_deref()),
        Cmd::Ablate => {
            let x = open(c)?;
            let rows = x.ablate()?;
            println!("tap_set,dataset,replicate,joint_acc1,student_acc1");
            for r in rows {
                println!("{},{},{},{:.2},{:.2}", r.tap_set, r.dataset, r.replicate, r.joint_acc1, r.student_acc1);
            }
            Ok(())
        }
        Cmd::RunAll => {
            let x = open(c)?;
            x.run_all()?;
            print_summary(x.run.root())
        }
        Cmd::DumpEmbeddings { model, level, split, tap } => dump_embeddings(c, &model, &level, &split, tap),
    }
}

fn print_summary(root: &Path) -> Result<()> {
    let p = root.join("summary.csv");
    let mut r = csv::Reader::from_path(&p).with_context(|| format!("reading {}", p.display()))?;
    println!("{:<18} {:<4} {:<10} {:>4} {:>8} {:>7}", "method", "taps", "dataset", "n", "acc@1", "sd");
    for s in r.deserialize::<SummaryRow>() {
        let s = s?;
        println!("{:<18} {:<4} {:<10} {:>4} {:>8.2} {:>7.2}", s.method, s.tap_set, s.dataset, s.replicates, s.mean_acc1, s.sd_acc1);
    }
    Ok(())
}

fn eval(c: &Common, filter: Option<&str>) -> Result<()> {
    let x = open(c)?;
    let mut w = csv::Writer::from_writer(std::io::stdout());
    for dir in mlfd_core::pipeline::finished_jobs(x.run.root())? {
        let records: Vec<Record> = read_records(&dir.join("records.csv"))?;
        for r in records {
            if filter.is_some_and(|f| !r.model.contains(f)) {
                continue;
            }
            let ck = dir.join("checkpoint");
            let fresh = match (Model::load(&ck, None), x.dataset_index(&r.dataset)) {
                (Ok(m), Ok(d)) if m.classes() == x.datasets[d].classes => {
                    let data = &x.datasets[d];
                    let acc = accuracy(&m.predict(&data.split_inputs(Split::Test)?)?, &data.split_labels(Split::Test), 0);
                    Record { acc1: acc.acc1, acc5: acc.acc5, k5: acc.k5, ..r }
                }
                _ => r,
            };
            w.serialize(fresh)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn dump_embeddings(c: &Common, model: &str, level: &str, split: &str, tap: Option<String>) -> Result<()> {
    let x = open(c)?;
    let split = Split::parse(split)?;
    let tap = tap.unwrap_or_else(|| x.cfg().tap_set.clone());
    let rep = x.cfg().seeds[0];
    let (kind, k) = model
        .rsplit_once('_')
        .and_then(|(kind, k)| k.parse::<usize>().ok().filter(|&k| k >= 1).map(|k| (kind, k - 1)))
        .ok_or_else(|| mlfd_core::Error::Config(format!("model '{model}': expected teacher_<k> or student_<k>")))?;
    let plan = x.plan();
    let (m, d) = match kind {
        "teacher" => {
            let d = plan.teachers.get(k).ok_or_else(|| mlfd_core::Error::Config(format!("no {model}")))?.0;
            (load_teachers(&x, rep)?.swap_remove(k), d)
        }
        "student" => {
            if k >= x.datasets.len() {
                bail!(mlfd_core::Error::Config(format!("no {model}")));
            }
            (mlfd_core::pipeline::load_student(&x, rep, &tap, k)?, k)
        }
        _ => bail!(mlfd_core::Error::Config(format!("model '{model}': expected teacher_<k> or student_<k>"))),
    };
    let data = &x.datasets[d];
    let (_, taps) = m.infer(&data.split_inputs(split)?, &[level.to_string()])?;
    let emb = &taps[level];
    let dir = x.run.root().join("embeddings").join(format!("rep{rep}_{model}_{level}_{}", split.as_str()));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let idx = data.splits.get(split);
    let mut w = csv::Writer::from_path(dir.join("index.csv"))?;
    w.write_record(["file", "sample", "label"])?;
    for (row, &i) in idx.iter().enumerate() {
        let file = format!("sample_{i:06}.tnsr");
        let t = emb.slice_rows(row, row + 1)?;
        mlfd_numerics::io::save(&dir.join(&file), &t.reshape(&t.shape()[1..])?)?;
        w.write_record([file, i.to_string(), data.labels[i].to_string()])?;
    }
    w.flush()?;
    println!("{} embeddings of shape {:?} written to {}", idx.len(), &emb.shape()[1..], dir.display());
    Ok(())
}
