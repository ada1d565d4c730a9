//! Pipeline configuration: a JSON file of defaults that individual CLI
//! flags override. All referenced paths are validated eagerly at startup.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use desco::querygen::GenConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub global_seed: Option<u64>,
    pub worker_count: Option<usize>,
    pub vocab: Option<PathBuf>,
    pub descriptions: Option<PathBuf>,
    pub negatives: Option<PathBuf>,
    pub captions: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub tokenizer: Option<String>,
    pub max_failure_rate: Option<f64>,
    pub log_level: Option<String>,
    pub gen: GenConfig,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: PipelineConfig = serde_json::from_str(&text)
            .with_context(|| format!("invalid config {}", path.display()))?;
        Ok(cfg)
    }

    /// Check every referenced input path up front so a long run cannot die
    /// halfway through on a typo.
    pub fn validate_paths(&self) -> Result<()> {
        for (name, path) in [
            ("vocab", &self.vocab),
            ("descriptions", &self.descriptions),
            ("negatives", &self.negatives),
            ("captions", &self.captions),
        ] {
            if let Some(path) = path {
                if !path.exists() {
                    bail!("{name} path does not exist: {}", path.display());
                }
            }
        }
        if let Some(rate) = self.max_failure_rate {
            if !(0.0..=1.0).contains(&rate) {
                bail!("max_failure_rate {rate} is outside [0, 1]");
            }
        }
        if let Some(workers) = self.worker_count {
            if workers < 1 {
                bail!("worker_count must be >= 1");
            }
        }
        self.gen.validate()?;
        Ok(())
    }

    pub fn worker_count(&self) -> usize {
        self.worker_count.unwrap_or(1).max(1)
    }

    pub fn max_failure_rate(&self) -> f64 {
        self.max_failure_rate.unwrap_or(0.1)
    }

    /// Resolved generation config: the global seed flag wins over the
    /// embedded one.
    pub fn gen_config(&self) -> GenConfig {
        let mut gen = self.gen.clone();
        if let Some(seed) = self.global_seed {
            gen.seed = seed;
        }
        gen
    }
}
