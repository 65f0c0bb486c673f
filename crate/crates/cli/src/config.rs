//! Run configuration: one TOML file, overridden by command-line flags.

use std::path::{Path, PathBuf};

use mrag_core::{Error, Result};
use mrag_core::embedding::EmbedderConfig;
use mrag_core::eval_metrics::Metric;
use mrag_core::flat_retriever::DEFAULT_K;
use mrag_core::generation::{AnswerStyle, GeneratorConfig};
use mrag_core::router::TrainConfig;
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub visual_kb: Option<PathBuf>,
    pub textual_kb: Option<PathBuf>,
    pub visual_index: Option<PathBuf>,
    pub textual_index: Option<PathBuf>,
    pub router_model: Option<PathBuf>,
    pub qaset: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub paths: Paths,
    /// Drives every stochastic command. Required by those commands.
    pub seed: Option<u64>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_metric")]
    pub metric: Metric,
    #[serde(default = "default_answer_style")]
    pub answer_style: AnswerStyle,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_embedder")]
    pub embedder: EmbedderConfig,
    #[serde(default = "default_generator")]
    pub generator: GeneratorConfig,
    /// Router training hyperparameters. Its seed comes from the top-level `seed`.
    #[serde(default)]
    pub router: TrainConfig,
}

fn default_k() -> usize {
    DEFAULT_K
}
fn default_metric() -> Metric {
    Metric::F1
}
fn default_answer_style() -> AnswerStyle {
    AnswerStyle::Sentence
}
fn default_max_in_flight() -> usize {
    4
}
fn default_embedder() -> EmbedderConfig {
    EmbedderConfig::hash(mrag_core::embedding::DEFAULT_HASH_DIM, 0)
}
fn default_generator() -> GeneratorConfig {
    GeneratorConfig::mock(0)
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config parses")
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.into(),
            source,
        })?;
        let bad = |e: toml::de::Error| Error::Config(format!("{}: {}", path.display(), one_line(&e.to_string())));
        let value: toml::Table = toml::from_str(&text).map_err(bad)?;
        if value
            .get("router")
            .and_then(|r| r.as_table())
            .is_some_and(|r| r.contains_key("seed"))
        {
            return Err(Error::Config("router.seed is not accepted; set the top-level seed".into()));
        }
        value.try_into().map_err(bad)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be at least 1".into()));
        }
        self.embedder.validate()?;
        self.generator.validate()?;
        for p in [
            &self.paths.visual_kb,
            &self.paths.textual_kb,
            &self.paths.visual_index,
            &self.paths.textual_index,
            &self.paths.router_model,
            &self.paths.qaset,
        ]
        .into_iter()
        .flatten()
        {
            if !p.exists() {
                return Err(Error::Config(format!("referenced file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn require_seed(&self, command: &str) -> Result<u64> {
        self.seed.ok_or_else(|| {
            Error::Config(format!("`{command}` is stochastic and needs a seed (--seed or top-level seed)"))
        })
    }

    pub fn require_path<'a>(&self, flag: Option<&'a Path>, configured: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
        flag.or(configured.as_deref())
            .ok_or_else(|| Error::Config(format!("missing {name} (flag or paths.{name})")))
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_has_defaults() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.k, 3);
        assert_eq!(cfg.seed, None);
        assert_eq!(cfg.router, TrainConfig::default());
    }

    #[test]
    fn router_seed_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 1\n[router]\nseed = 2\n").unwrap();
        assert!(RunConfig::load(Some(&path)).is_err());
        std::fs::write(&path, "seed = 1\n[router]\nepochs = 2\n").unwrap();
        assert_eq!(RunConfig::load(Some(&path)).unwrap().router.epochs, 2);
    }

    #[test]
    fn readme_example_parses() {
        let readme = include_str!("../../../README.md");
        let block = readme.split("```toml\n").nth(1).unwrap().split("```").next().unwrap();
        let cfg: RunConfig = toml::from_str(block).unwrap();
        assert_eq!(cfg.seed, Some(42));
        assert_eq!(cfg.router, TrainConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "sede = 1\n").unwrap();
        assert!(RunConfig::load(Some(&path)).is_err());
    }
}
