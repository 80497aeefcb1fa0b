mod common;

use std::fs;

use common::{code, mlfd, write_config};

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("run");
    assert_eq!(code(&mlfd(&cfg, &out, &["--set", "bogus=1", "gen-data"])), 2);
    assert_eq!(code(&mlfd(&cfg, &out, &["--set", "kd.tau=-1", "gen-data"])), 2);
    assert_eq!(code(&mlfd(&dir.path().join("missing.toml"), &out, &["gen-data"])), 1);
    let o = mlfd(&cfg, &out, &["baseline", "--method", "nope"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("dataset-specific"));
}

#[test]
fn out_of_order_stage_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("run");
    assert_eq!(code(&mlfd(&cfg, &out, &["distill"])), 3);
    assert_eq!(code(&mlfd(&cfg, &out, &["train-joint"])), 3);
}

#[test]
fn diverging_training_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let o = mlfd(&cfg, &dir.path().join("run"), &["--set", "train.teacher.learning_rate=1e300", "train-teacher"]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn staged_commands_match_run_all() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let staged = dir.path().join("staged");
    for args in [
        vec!["gen-data"],
        vec!["train-teacher"],
        vec!["build-cache"],
        vec!["train-joint"],
        vec!["extract-targets"],
        vec!["distill"],
        vec!["baseline", "--method", "dataset-specific"],
        vec!["baseline", "--method", "multi-head"],
        vec!["baseline", "--method", "joint-head"],
        vec!["report"],
    ] {
        let o = mlfd(&cfg, &staged, &args);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let whole = dir.path().join("whole");
    assert_eq!(code(&mlfd(&cfg, &whole, &["run-all"])), 0);
    assert_eq!(fs::read(staged.join("report.csv")).unwrap(), fs::read(whole.join("report.csv")).unwrap());

    let eval = mlfd(&cfg, &whole, &["eval", "--model", "student_d1"]);
    assert_eq!(code(&eval), 0);
    let text = String::from_utf8(eval.stdout).unwrap();
    assert!(text.lines().next().unwrap().contains("acc1"));
    assert!(text.contains("student_d1"));
}

#[test]
fn dump_embeddings_writes_one_file_per_sample() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("run");
    assert_eq!(code(&mlfd(&cfg, &out, &["train-teacher"])), 0);
    let o = mlfd(&cfg, &out, &["dump-embeddings", "--model", "teacher_2", "--level", "stage3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let emb = out.join("embeddings/rep0_teacher_2_stage3_test");
    let index = fs::read_to_string(emb.join("index.csv")).unwrap();
    assert_eq!(index.lines().count(), 1 + 12);
    let first = index.lines().nth(1).unwrap().split(',').next().unwrap().to_string();
    let t = mlfd_numerics::io::load(&emb.join(first)).unwrap();
    assert_eq!(t.shape()[0], 6);
    assert_eq!(code(&mlfd(&cfg, &out, &["dump-embeddings", "--model", "teacher_2", "--level", "nowhere"])), 2);
}

#[test]
fn config_reference_lists_sections() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let o = mlfd(&cfg, dir.path(), &["config-reference"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8(o.stdout).unwrap().contains("[kd]"));
}
