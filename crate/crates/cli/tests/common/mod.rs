#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const SMALL_SPEC: &str = r#"{
  "n_speakers_per_split": {"train": 10, "validation": 3, "test_a": 3, "test_b": 3, "test_c": 3},
  "utterances_per_speaker": 6,
  "utterances_per_split": {"test_a": 3},
  "t_raw": 256
}"#;

pub const SMALL_CONFIG: &str = r#"{
  "encoder": {
    "d_model": 16, "n_layers": 1, "n_heads": 2, "ffn_dim": 32,
    "conv_channels": [8, 16], "k_pseudo": 8, "interpreter_hidden": [32, 16]
  },
  "pretrain": {"epochs": 2, "span": 4},
  "finetune": {"epochs_max": 3},
  "calibration": {"top_k": 3},
  "gap": {"k_values": [3, 6]}
}"#;

/// Every subcommand in pipeline order.
pub const CHAIN: &[&[&str]] = &[
    &["gen-data", "--spec", "spec.json"],
    &["pseudo-label"],
    &["papt"],
    &["finetune"],
    &["predict"],
    &["calibrate"],
    &["evaluate"],
    &["shift-analysis"],
    &["gap"],
    &["ablate-fusion"],
];

pub fn perser(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_perser"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn perser")
}

/// Writes the small spec and config into `dir`.
pub fn prepare(dir: &Path) {
    fs::write(dir.join("spec.json"), SMALL_SPEC).unwrap();
    fs::write(dir.join("config.json"), SMALL_CONFIG).unwrap();
}

/// Runs the whole chain into `run_dir` under `dir`; returns the first failure.
pub fn run_chain(dir: &Path, run_dir: &str, seed: &str) -> Result<(), String> {
    for step in CHAIN {
        let mut args = vec!["--run-dir", run_dir, "--seed", seed, "--config", "config.json"];
        args.extend_from_slice(step);
        let out = perser(dir, &args);
        if !out.status.success() {
            return Err(format!("{}: {}", step[0], String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(())
}

/// Relative path to contents of every file under `root` except manifests.
pub fn artifacts(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            let rel = p.strip_prefix(root).unwrap().to_path_buf();
            if rel.starts_with("manifests") {
                continue;
            }
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}
