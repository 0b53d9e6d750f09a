//! Layered run configuration.
//!
//! Built-in defaults are serialized to a TOML tree, the user's file is merged
//! on top table by table, and the result is deserialized strictly so unknown
//! keys are errors. The seed is then overridden by `TRISTREAM_SEED` and
//! finally by `--seed`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use toml::Value;

use tristream::analysis::ProbeConfig;
use tristream::theory::SuiteConfig;
use tristream::train::{FinetuneConfig, OptimizerConfig, PretrainConfig};
use tristream::ModelConfig;

pub const SEED_ENV: &str = "TRISTREAM_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Full-size widths and depths.
    Full,
    Small,
    Tiny,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Full => ModelConfig::default(),
            Preset::Small => ModelConfig::small(),
            Preset::Tiny => ModelConfig::tiny(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    /// Unlabelled structures for pretraining.
    pub pretrain: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub held_out: Option<PathBuf>,
    /// Structures to embed.
    pub embed: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub index: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub deterministic: bool,
    /// Worker threads; 0 uses every core (one when deterministic).
    pub workers: usize,
    pub out: PathBuf,
    pub preset: Preset,
    pub data: DataPaths,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub probe: ProbeConfig,
    pub suite: SuiteConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            deterministic: false,
            workers: 0,
            out: PathBuf::from("runs"),
            preset: Preset::Full,
            data: DataPaths::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            probe: ProbeConfig::default(),
            suite: SuiteConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file and environment.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

/// Recursively overlays `top` onto `base`; tables merge, everything else is
/// replaced.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Table(b), Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Parses a TOML document layered over the defaults. A `preset` key
    /// selects the model defaults that `[model]` then refines.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: Value = toml::from_str(text).context("config is not valid TOML")?;
        let preset = match user.get("preset") {
            Some(v) => Preset::deserialize(v.clone()).context("unknown preset")?,
            None => Preset::Full,
        };
        let defaults = RunConfig {
            preset,
            model: preset.model(),
            ..Default::default()
        };
        let mut tree = Value::try_from(&defaults).context("serializing defaults")?;
        merge(&mut tree, user);
        let cfg: RunConfig = tree.try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::from_toml(&text).with_context(|| format!("in {}", p.display()))
            }
            None => Self::from_toml(""),
        }
    }

    /// Applies the environment seed, then command-line flags.
    pub fn layer(mut self, env_seed: Option<&str>, flags: &Overrides) -> Result<Self> {
        if let Some(s) = env_seed {
            self.seed = s.trim().parse().with_context(|| format!("{SEED_ENV} must be an unsigned integer, got {s:?}"))?;
        }
        if let Some(s) = flags.seed {
            self.seed = s;
        }
        if flags.deterministic {
            self.deterministic = true;
        }
        if let Some(w) = flags.workers {
            self.workers = w;
        }
        if let Some(o) = &flags.out {
            self.out = o.clone();
        }
        self.pretrain.seed = self.seed;
        self.finetune.seed = self.seed;
        self.probe.seed = self.seed;
        self.suite.seed = self.seed;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.optimizer.validate()?;
        self.pretrain.augment.validate()?;
        self.finetune.optimizer.validate()?;
        if self.suite.trials == 0 {
            bail!("suite.trials must be at least 1");
        }
        Ok(())
    }

    /// Threads for the worker pool.
    pub fn threads(&self) -> usize {
        match (self.workers, self.deterministic) {
            (0, true) => 1,
            (w, _) => w,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

/// Optimizer with its step count replaced when `steps` is given.
pub fn with_steps(mut opt: OptimizerConfig, steps: Option<usize>) -> OptimizerConfig {
    if let Some(s) = steps {
        opt.steps = s;
    }
    opt
}
