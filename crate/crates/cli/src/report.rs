use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct Failure {
    pub id: String,
    pub error: String,
    /// Hard failures make the stage exit non-zero.
    pub hard: bool,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct Counts {
    pub inputs: usize,
    pub outputs: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageReport {
    pub stage: &'static str,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub counts: Counts,
    pub failures: Vec<Failure>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub details: Option<serde_json::Value>,
}

impl StageReport {
    pub fn new(stage: &'static str) -> Self {
        Self {
            stage,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            counts: Counts::default(),
            failures: Vec::new(),
            warnings: Vec::new(),
            details: None,
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.into(), path.display().to_string());
    }

    pub fn output(&mut self, name: &str, path: &Path) {
        self.outputs.insert(name.into(), path.display().to_string());
    }

    pub fn fail(&mut self, id: impl Into<String>, error: impl ToString, hard: bool) {
        self.failures.push(Failure {
            id: id.into(),
            error: error.to_string(),
            hard,
        });
    }

    pub fn warn(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        log::warn!("{msg}");
        self.warnings.push(msg);
    }

    /// Fixes the counts so that `outputs + failures == inputs`.
    pub fn tally(&mut self, inputs: usize, outputs: usize) {
        self.counts = Counts {
            inputs,
            outputs,
            failures: self.failures.len(),
        };
        debug_assert_eq!(outputs + self.failures.len(), inputs, "{} counts do not reconcile", self.stage);
    }

    pub fn hard_failures(&self) -> Vec<&Failure> {
        self.failures.iter().filter(|f| f.hard).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<std::path::PathBuf> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(format!("{}.report.json", self.stage));
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
