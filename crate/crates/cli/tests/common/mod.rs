#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const STAGES: [&str; 7] = ["ingest", "gcot", "tasks", "embed", "retrieve", "assemble", "verify"];

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

/// Copies the bundled fixture set into `dir` and returns the config path.
pub fn stage_fixtures(dir: &Path) -> PathBuf {
    for f in ["config.json", "corpus.jsonl", "vqa.jsonl", "replay.jsonl"] {
        std::fs::copy(fixtures().join(f), dir.join(f)).unwrap();
    }
    dir.join("config.json")
}

pub fn forge(stage: &str, config: &Path, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forge"))
        .arg(stage)
        .arg("--config")
        .arg(config)
        .args(extra)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn forge")
}

/// Runs every stage in order; returns the first failing stage, if any.
pub fn run_pipeline(config: &Path, extra: &[&str]) -> Result<(), String> {
    for stage in STAGES {
        let out = forge(stage, config, extra);
        if !out.status.success() {
            return Err(format!(
                "{stage} exited {:?}: {}",
                out.status.code(),
                String::from_utf8_lossy(&out.stderr)
            ));
        }
    }
    Ok(())
}
