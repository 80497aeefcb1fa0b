#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const TINY: &str = r#"
name = "tiny"
seeds = [0]
tap_set = "L2"
ablation_tap_sets = ["L1", "L2"]

[data]
seed = 3

[data.family]
m = 2
classes = [3, 3]
latent_dim = 8
train_size = 40
test_size = 12
val_fraction = 0.2
style_scale = 0.5
noise_sigma = 0.3
render = { kind = "image", side = 8 }

[[teachers]]
arch = "cnn-small"
widths = [3, 4, 5]
hidden = 6

[[teachers]]
arch = "cnn-se"
widths = [4, 5, 6]
hidden = 8

[[students]]
arch = "cnn-small"
widths = [2, 3, 4]
hidden = 4

[train.teacher]
learning_rate = 0.01
batch_size = 8
max_epochs = 2
min_epochs = 2

[train.joint]
learning_rate = 0.01
batch_size = 8
max_epochs = 2
min_epochs = 2

[train.student]
learning_rate = 0.01
batch_size = 8
max_epochs = 2
min_epochs = 2

[train.probe]
learning_rate = 0.01
batch_size = 8
max_epochs = 1
min_epochs = 1
"#;

pub fn write_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}

/// Runs the binary quietly with `--config`, `--out` and `args`.
pub fn mlfd(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlfd"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .arg("--quiet")
        .args(args)
        .env_remove("MLFD_CACHE_DIR")
        .output()
        .unwrap()
}

pub fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}
