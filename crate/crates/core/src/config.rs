//! Run configuration, stored as TOML.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bridge::{BridgeError, BridgeModel};
use crate::cnf::PropagationOptions;
use crate::mcfs::{McfsConfig, RolloutVariant};
use crate::model::{fit_table, read_records, JwPrior, ModelError, PriorModel, UniformPrior, ValueModel};
use crate::subsolver::SubsolverHandle;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("config i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config serialize: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasePrior {
    #[default]
    Uniform,
    Jw,
}

impl BasePrior {
    pub fn build(self) -> Arc<dyn PriorModel> {
        match self {
            BasePrior::Uniform => Arc::new(UniformPrior),
            BasePrior::Jw => Arc::new(JwPrior),
        }
    }
}

/// Where priors (and optionally values) come from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelChoice {
    #[default]
    Uniform,
    Jw,
    /// A table fitted to training records (JSON lines).
    Table {
        path: PathBuf,
        #[serde(default)]
        fallback: BasePrior,
    },
    /// An external model process.
    Bridge {
        program: PathBuf,
        #[serde(default)]
        args: Vec<String>,
        #[serde(default = "default_bridge_timeout")]
        timeout_ms: u64,
        #[serde(default)]
        fallback: BasePrior,
    },
}

fn default_bridge_timeout() -> u64 {
    10_000
}

/// A prior model and, when the source provides one, a value model.
pub struct LoadedModel {
    pub prior: Arc<dyn PriorModel>,
    pub value: Option<Arc<dyn ValueModel>>,
}

impl ModelChoice {
    pub fn load(&self) -> Result<LoadedModel, ConfigError> {
        Ok(match self {
            ModelChoice::Uniform => LoadedModel {
                prior: Arc::new(UniformPrior),
                value: None,
            },
            ModelChoice::Jw => LoadedModel {
                prior: Arc::new(JwPrior),
                value: None,
            },
            ModelChoice::Table { path, fallback } => {
                let file = std::io::BufReader::new(std::fs::File::open(path)?);
                let table = Arc::new(fit_table(&read_records(file)?, fallback.build())?);
                LoadedModel {
                    prior: table.clone(),
                    value: Some(table),
                }
            }
            ModelChoice::Bridge {
                program,
                args,
                timeout_ms,
                fallback,
            } => {
                let bridge = Arc::new(BridgeModel::spawn(
                    program,
                    args,
                    Duration::from_millis(*timeout_ms),
                    fallback.build(),
                )?);
                LoadedModel {
                    prior: bridge.clone(),
                    value: Some(bridge),
                }
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub ell: usize,
    pub rollouts: usize,
    pub c_puct: f64,
    pub commit_mix: f64,
    pub error_threshold: f64,
    pub dag: bool,
    pub calibration_decay: Option<f64>,
    pub pure_literals: bool,
    pub seed: u64,
    pub iterations: usize,
    /// Variables and count of generated training instances when no
    /// instance directory is given.
    pub train_vars: u32,
    pub train_count: usize,
    /// Expanded-node budget and checkpoint spacing for the efficiency
    /// experiment.
    pub budget: u64,
    pub cadence: u64,
    /// Bench policy that ratios are reported against.
    pub baseline: String,
    pub instances: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub subsolver: SubsolverHandle,
    pub model: ModelChoice,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            ell: 4,
            rollouts: 1_000,
            c_puct: 0.5,
            commit_mix: 0.5,
            error_threshold: 0.5,
            dag: true,
            calibration_decay: None,
            pure_literals: true,
            seed: 0,
            iterations: 1,
            train_vars: 20,
            train_count: 50,
            budget: 20_000,
            cadence: 250,
            baseline: "uniform".into(),
            instances: None,
            output_dir: None,
            subsolver: SubsolverHandle::default(),
            model: ModelChoice::default(),
        }
    }
}

/// Preset names accepted by [`RunConfig::preset`].
pub const PRESETS: [&str; 4] = ["desk", "r3sat", "sgen", "satfc"];

impl RunConfig {
    /// `desk` is the default small-scale setup; `r3sat`, `sgen` and `satfc`
    /// use 100 000 rollouts with depth bounds 6, 8 and 5.
    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let full = |ell, train_vars| RunConfig {
            ell,
            rollouts: 100_000,
            train_vars,
            train_count: 2_000,
            ..RunConfig::default()
        };
        match name {
            "desk" => Ok(RunConfig::default()),
            "r3sat" => Ok(full(6, 300)),
            "sgen" => Ok(full(8, 65)),
            "satfc" => Ok(full(5, 0)),
            other => Err(ConfigError::UnknownPreset(other.into())),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: &str| Err(ConfigError::Invalid(msg.into()));
        if self.rollouts == 0 {
            return bad("rollouts must be positive");
        }
        if !(self.c_puct > 0.0 && self.c_puct.is_finite()) {
            return bad("c_puct must be positive");
        }
        if !(0.0..=1.0).contains(&self.commit_mix) {
            return bad("commit_mix must lie in [0, 1]");
        }
        if !(self.error_threshold > 0.0 && self.error_threshold.is_finite()) {
            return bad("error_threshold must be positive");
        }
        if self.calibration_decay.is_some_and(|w| !(w > 0.0 && w <= 1.0)) {
            return bad("calibration_decay must lie in (0, 1]");
        }
        if self.budget == 0 || self.cadence == 0 {
            return bad("budget and cadence must be positive");
        }
        Ok(())
    }

    pub fn mcfs(&self) -> McfsConfig {
        McfsConfig {
            ell: self.ell,
            rollouts: self.rollouts,
            c_puct: self.c_puct,
            commit_mix: self.commit_mix,
            error_threshold: self.error_threshold,
            dag: self.dag,
            calibration_decay: self.calibration_decay,
            variant: RolloutVariant::Knuth,
        }
    }

    pub fn propagation(&self) -> PropagationOptions {
        PropagationOptions {
            pure_literals: self.pure_literals,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}
