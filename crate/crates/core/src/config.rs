//! Run configuration: one TOML file covering every module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mpc::SolverSettings;
use crate::rl::TrainConfig;
use crate::systems::{Battery, BatteryConfig, Pendulum, PendulumConfig, SystemKind, SystemModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub steps: usize,
    /// Test-set passes for learned policies.
    pub rl_repeats: usize,
    /// Periods of the fixed-schedule baselines.
    pub periods: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            steps: 100,
            rl_repeats: 5,
            periods: vec![2, 5, 10, 20],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub system: SystemKind,
    /// Master seed of generated test sets.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub solver: SolverSettings,
    pub eval: EvalConfig,
    pub train: TrainConfig,
    pub pendulum: PendulumConfig,
    pub battery: BatteryConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            system: SystemKind::Pendulum,
            seed: 0,
            out_dir: PathBuf::from("out"),
            solver: SolverSettings::default(),
            eval: EvalConfig::default(),
            train: TrainConfig::default(),
            pendulum: PendulumConfig::default(),
            battery: BatteryConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn build_system(&self) -> Result<Box<dyn SystemModel>> {
        Ok(match self.system {
            SystemKind::Pendulum => Box::new(Pendulum::new(self.pendulum.clone())?),
            SystemKind::Battery => Box::new(Battery::new(self.battery.clone())?),
        })
    }
}
