#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use ofdiff_cli::RunConfig;

/// Small enough that a full pipeline runs in seconds.
pub fn tiny_config(seed: u64) -> RunConfig {
    RunConfig::from_toml_str(&format!(
        r#"
seed = {seed}
[dataset]
train_count = 12
val_count = 6
[model]
base_width = 4
levels = 2
embed_dim = 8
[train]
batch = 4
iterations = 5
timesteps = 20
checkpoint_every = 2
[sample]
steps = 4
[ddpo]
enabled = true
updates = 2
batch = 4
steps = 3
k = 2
[eval]
mmd_permutations = 20
"#
    ))
    .expect("tiny config parses")
}

pub fn write_config(cfg: &RunConfig, path: &Path) {
    std::fs::write(path, toml::to_string(cfg).expect("config serializes")).unwrap();
}

pub fn ofdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ofdiff"))
        .args(args)
        .env("OFDIFF_LOG", "error")
        .output()
        .expect("binary runs")
}

pub fn ofdiff_ok(args: &[&str]) -> Output {
    let out = ofdiff(args);
    assert!(
        out.status.success(),
        "ofdiff {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}
