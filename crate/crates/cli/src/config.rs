//! Pipeline configuration file.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use iconoforge::curate::DEFAULT_NEAR_DUP_THRESHOLD;
use iconoforge::model::{ModelConfig, DEFAULT_THRESHOLD};
use iconoforge::refine::DEFAULT_PROPOSAL_THRESHOLD;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub store: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub pretrained: Option<PathBuf>,
    pub keywords: Option<PathBuf>,
    pub reports: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub fixture: u64,
    pub split: u64,
    pub pretrain: u64,
    pub train: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            fixture: 1,
            split: 42,
            pretrain: 7,
            train: 0,
        }
    }
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Seeds {
            fixture: seed,
            split: seed,
            pretrain: seed,
            train: seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub near_dup: u32,
    pub decision: f64,
    pub proposal: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            near_dup: DEFAULT_NEAR_DUP_THRESHOLD,
            decision: DEFAULT_THRESHOLD,
            proposal: DEFAULT_PROPOSAL_THRESHOLD,
        }
    }
}

/// Everything the subcommands read from `--config`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub seeds: Seeds,
    pub thresholds: Thresholds,
    pub model: ModelConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            paths: Paths::default(),
            seeds: Seeds::default(),
            thresholds: Thresholds::default(),
            model: ModelConfig::tiny(),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    paths: Paths,
    #[serde(default)]
    seeds: Seeds,
    #[serde(default)]
    thresholds: Thresholds,
    #[serde(default)]
    model: toml::Table,
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl PipelineConfig {
    /// Parses a config file. Keys missing from `[model]` keep the values of
    /// the reduced-depth preset.
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text)?;
        let mut model = toml::Table::try_from(ModelConfig::tiny()).context("serialize model defaults")?;
        merge(&mut model, raw.model);
        let model: ModelConfig = model.try_into().context("[model]")?;
        model.validate()?;
        Ok(PipelineConfig {
            paths: raw.paths,
            seeds: raw.seeds,
            thresholds: raw.thresholds,
            model,
        })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("config file {}", p.display()))?;
                Self::from_toml(&text).with_context(|| format!("config file {}", p.display()))
            }
        }
    }
}
