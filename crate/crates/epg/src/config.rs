//! Experiment configuration: one JSON document holding the task
//! distribution, every evolution scalar, seeds and output settings.

use std::path::{Path, PathBuf};

use epg_core::envs::TaskDistribution;
use epg_core::outerloop::EpgConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Environment variable that overrides `out_dir`.
pub const OUT_DIR_ENV: &str = "EPG_OUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestSettings {
    /// Number of fresh tasks for test-time training.
    #[serde(default = "default_test_seeds")]
    pub seeds: usize,
    /// Base seed for test tasks, independent of the training seed.
    #[serde(default = "default_test_seed")]
    pub seed: u64,
}

impl Default for TestSettings {
    fn default() -> Self {
        Self { seeds: default_test_seeds(), seed: default_test_seed() }
    }
}

fn default_test_seeds() -> usize {
    20
}

fn default_test_seed() -> u64 {
    1_000_003
}

fn default_checkpoint_every() -> u64 {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub task: TaskDistribution,
    pub epg: EpgConfig,
    /// Write a resumable checkpoint every this many epochs (0 disables).
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub test: TestSettings,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Checks every field, naming the offending one.
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, e: epg_core::Error| CliError::Config(format!("{name}: {e}"));
        if self.name.trim().is_empty() {
            return Err(CliError::Config("name: must not be empty".into()));
        }
        self.task.validate().map_err(|e| field("task", e))?;
        self.epg.validate().map_err(|e| field("epg", e))?;
        if self.epg.inner.gamma != self.task.gamma {
            return Err(CliError::Config(format!(
                "epg.inner.gamma ({}) must equal task.gamma ({})",
                self.epg.inner.gamma, self.task.gamma
            )));
        }
        if self.test.seeds == 0 {
            return Err(CliError::Config("test.seeds: must be at least 1".into()));
        }
        Ok(())
    }

    /// Sorted-key JSON, stable across formatting differences in the source file.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&value).expect("value serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical form. The output
    /// location is not part of an experiment's identity and is left out.
    pub fn hash(&self) -> String {
        let identity = Self { out_dir: None, ..self.clone() };
        let digest = Sha256::digest(identity.canonical_json().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Output directory: `$EPG_OUT_DIR` if set, else `out_dir`, else `runs/<name>`.
    pub fn resolve_out_dir(&self) -> PathBuf {
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV).filter(|d| !d.is_empty()) {
            return PathBuf::from(dir);
        }
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(&self.name))
    }
}
