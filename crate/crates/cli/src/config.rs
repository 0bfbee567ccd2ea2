use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use spinenav::agent::{AgentConfig, ClassifierTrainConfig};
use spinenav::env::GridSpec;
use spinenav::eval::EvalOptions;
use spinenav::nn::Variant;
use spinenav::synth::DatasetConfig;

/// Everything a command needs. Every section is optional in the file and
/// falls back to its defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds every component: dataset, agent, classifiers and evaluation.
    pub seed: u64,
    pub out: PathBuf,
    /// Dataset directory, `<out>/data` when absent.
    pub data_dir: Option<PathBuf>,
    pub grid: GridSpec,
    pub dataset: DatasetConfig,
    pub agent: AgentConfig,
    /// Goal/non-goal classifier used by the MS variant.
    pub stop: ClassifierTrainConfig,
    /// Frame-to-action classifier baseline.
    pub baseline: ClassifierTrainConfig,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs"),
            data_dir: None,
            grid: GridSpec::default(),
            dataset: DatasetConfig::default(),
            agent: AgentConfig::default(),
            stop: ClassifierTrainConfig::default(),
            baseline: ClassifierTrainConfig::default(),
            eval: EvalOptions::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub variant: Option<Variant>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Applies overrides, propagates the seed and validates every section.
    pub fn resolve(mut self, overrides: &Overrides) -> Result<Self> {
        if let Some(seed) = overrides.seed {
            self.seed = seed;
        }
        if let Some(out) = &overrides.out {
            self.out = out.clone();
        }
        if let Some(jobs) = overrides.jobs {
            self.eval.jobs = jobs;
        }
        if let Some(variant) = overrides.variant {
            self.agent = self.agent.with_variant(variant);
        }
        self.data_dir = Some(self.data_dir());
        self.dataset.seed = self.seed;
        self.agent.seed = self.seed;
        self.stop.seed = self.seed;
        self.baseline.seed = self.seed;
        self.eval.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate().context("[grid]")?;
        self.dataset.validate().context("[dataset]")?;
        self.agent.validate().context("[agent]")?;
        self.stop.validate().context("[stop]")?;
        self.baseline.validate().context("[baseline]")?;
        if self.eval.t_max == 0 || self.eval.jobs == 0 {
            bail!("[eval]: t_max and jobs must be positive");
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.out.join("data"))
    }

    pub fn variant_dir(&self) -> PathBuf {
        self.out.join(self.agent.variant.label().to_lowercase())
    }

    pub fn q_checkpoint(&self) -> PathBuf {
        self.variant_dir().join("q_network.ckpt")
    }

    pub fn stop_dir(&self) -> PathBuf {
        self.out.join("stop")
    }

    pub fn stop_checkpoint(&self) -> PathBuf {
        self.stop_dir().join("stop_classifier.ckpt")
    }

    pub fn baseline_dir(&self) -> PathBuf {
        self.out.join("baseline")
    }

    pub fn baseline_checkpoint(&self) -> PathBuf {
        self.baseline_dir().join("action_classifier.ckpt")
    }

    pub fn eval_dir(&self, baseline: bool) -> PathBuf {
        let name = if baseline {
            "baseline".to_string()
        } else {
            self.agent.variant.label().to_lowercase()
        };
        self.out.join("eval").join(name)
    }
}
