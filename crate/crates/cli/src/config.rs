use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use forge_core::embed::RetrievalMode;
use forge_core::gcot::VerticalConvention;
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LlmMode {
    Live,
    #[default]
    Replay,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub endpoint: String,
    pub model: String,
    pub mode: LlmMode,
    /// Replay fixture, JSONL of `{prompt_hash, reply}`.
    pub replay: Option<PathBuf>,
    pub max_concurrency: usize,
    pub max_retries: usize,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-3.5-turbo".into(),
            mode: LlmMode::Replay,
            replay: None,
            max_concurrency: 4,
            max_retries: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    /// Feature hashing for text, content-seeded vectors for video.
    #[default]
    Hashed,
    /// Precomputed `EMB1` files keyed by triplet id.
    File,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub provider: ProviderKind,
    pub dim: usize,
    pub text_file: Option<PathBuf>,
    pub video_file: Option<PathBuf>,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            provider: ProviderKind::Hashed,
            dim: 64,
            text_file: None,
            video_file: None,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// BDD-X-style annotation JSONL.
    pub corpus: Option<PathBuf>,
    /// VQA records for GCoT generation.
    pub vqa: Option<PathBuf>,
    /// Directory with instruction pools, the GCoT prompt and
    /// `definitions/`. Bundled copies are used when unset.
    pub templates: Option<PathBuf>,
    /// Where `text.emb` / `video.emb` live. Defaults to `<output>/embeddings`.
    pub embeddings: Option<PathBuf>,
    pub output: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub k: usize,
    pub retrieval_mode: RetrievalMode,
    pub conversation_ratio: f64,
    pub max_len: usize,
    pub seed: u64,
    pub vertical_convention: VerticalConvention,
    pub embeddings: EmbeddingConfig,
    pub llm: LlmConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: Paths {
                output: PathBuf::from("out"),
                ..Default::default()
            },
            k: 3,
            retrieval_mode: RetrievalMode::TextOnly,
            conversation_ratio: 1.0,
            max_len: 1024,
            seed: 0,
            vertical_convention: VerticalConvention::YUp,
            embeddings: EmbeddingConfig::default(),
            llm: LlmConfig::default(),
        }
    }
}

pub struct Overrides {
    pub seed: Option<u64>,
    pub k: Option<usize>,
    pub mode: Option<RetrievalMode>,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    /// Loads a JSON config; relative paths are taken from the config's
    /// directory. Flags win over file values.
    pub fn load(path: &Path, overrides: Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: PipelineConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let p = &mut cfg.paths;
        for opt in [&mut p.corpus, &mut p.vqa, &mut p.templates, &mut p.embeddings] {
            if let Some(x) = opt.as_mut() {
                resolve(base, x);
            }
        }
        resolve(base, &mut p.output);
        for opt in [&mut cfg.embeddings.text_file, &mut cfg.embeddings.video_file, &mut cfg.llm.replay] {
            if let Some(x) = opt.as_mut() {
                resolve(base, x);
            }
        }

        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(k) = overrides.k {
            cfg.k = k;
        }
        if let Some(mode) = overrides.mode {
            cfg.retrieval_mode = mode;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            bail!("k must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.conversation_ratio) {
            bail!("conversation_ratio {} outside [0, 1]", self.conversation_ratio);
        }
        if self.max_len < 64 {
            bail!("max_len {} is below the minimum of 64", self.max_len);
        }
        if self.embeddings.dim == 0 {
            bail!("embeddings.dim must be positive");
        }
        if self.llm.max_concurrency == 0 {
            bail!("llm.max_concurrency must be positive");
        }
        Ok(())
    }

    pub fn output_dir(&self) -> &Path {
        &self.paths.output
    }

    pub fn embeddings_dir(&self) -> PathBuf {
        self.paths
            .embeddings
            .clone()
            .unwrap_or_else(|| self.paths.output.join("embeddings"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("cfg.json");
        std::fs::write(&p, text).unwrap();
        p
    }

    fn none() -> Overrides {
        Overrides { seed: None, k: None, mode: None }
    }

    #[test]
    fn defaults_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), r#"{"paths": {"corpus": "c.jsonl", "output": "out"}}"#);
        let cfg = PipelineConfig::load(&p, none()).unwrap();
        assert_eq!(cfg.k, 3);
        assert_eq!(cfg.max_len, 1024);
        assert_eq!(cfg.retrieval_mode, RetrievalMode::TextOnly);
        assert_eq!(cfg.paths.corpus.clone().unwrap(), dir.path().join("c.jsonl"));
        assert_eq!(cfg.embeddings_dir(), dir.path().join("out/embeddings"));
    }

    #[test]
    fn flags_override() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), r#"{"k": 5, "seed": 1}"#);
        let cfg = PipelineConfig::load(
            &p,
            Overrides {
                seed: Some(9),
                k: Some(2),
                mode: Some(RetrievalMode::Union),
            },
        )
        .unwrap();
        assert_eq!((cfg.seed, cfg.k, cfg.retrieval_mode), (9, 2, RetrievalMode::Union));
    }

    #[test]
    fn invalid_values() {
        let dir = tempfile::tempdir().unwrap();
        for bad in [r#"{"k": 0}"#, r#"{"conversation_ratio": 1.5}"#, r#"{"max_len": 10}"#, r#"{"bogus": 1}"#] {
            let p = write(dir.path(), bad);
            assert!(PipelineConfig::load(&p, none()).is_err(), "{bad}");
        }
    }
}
