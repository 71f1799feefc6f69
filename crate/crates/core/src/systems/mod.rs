//! Benchmark plants behind a common contract.

pub mod battery;
pub mod market;
pub mod pendulum;

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::lqr::LqrGain;
use crate::mpc::OcpModel;
use crate::seed::{derive_seed, stream};

pub use battery::{Battery, BatteryConfig};
pub use market::{MarketConfig, MarketSeries};
pub use pendulum::{Pendulum, PendulumConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemKind {
    Pendulum,
    Battery,
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SystemKind::Pendulum => "pendulum",
            SystemKind::Battery => "battery",
        })
    }
}

impl FromStr for SystemKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "pendulum" => Ok(SystemKind::Pendulum),
            "battery" => Ok(SystemKind::Battery),
            other => Err(crate::Error::Config(format!("unknown system `{other}`"))),
        }
    }
}

/// Seeds of the environment streams of one episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSeeds {
    pub initial: u64,
    pub noise: u64,
    pub market: u64,
    pub forecast: u64,
}

impl EpisodeSeeds {
    pub fn derive(master: u64, index: u64) -> Self {
        let episode = derive_seed(master, stream::EPISODE, index);
        Self {
            initial: derive_seed(episode, stream::INITIAL, 0),
            noise: derive_seed(episode, stream::NOISE, 0),
            market: derive_seed(episode, stream::MARKET, 0),
            forecast: derive_seed(episode, stream::FORECAST, 0),
        }
    }
}

/// One realization of a plant's randomness.
pub trait EpisodeEnv {
    fn initial_state(&self) -> DVector<f64>;
    /// Time-varying parameters observed at `step` (empty when the plant has none).
    fn observation(&self, step: usize) -> DVector<f64>;
    /// MPC parameter forecast for steps `anchor..anchor + horizon`.
    fn forecast(&self, anchor: usize, horizon: usize) -> Vec<DVector<f64>>;
    fn plant_step(
        &mut self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        recompute: bool,
        step: usize,
    ) -> DVector<f64>;
    fn step_cost(&self, x: &DVector<f64>, u: &DVector<f64>, recompute: bool, step: usize) -> f64;
    fn terminal_cost(&self, x: &DVector<f64>) -> f64;
    fn market(&self) -> Option<&MarketSeries> {
        None
    }
}

/// Everything the closed loop needs from a plant.
pub trait SystemModel: Send + Sync {
    fn kind(&self) -> SystemKind;
    fn ocp_model(&self) -> &dyn OcpModel;
    fn horizon(&self) -> usize;
    fn input_bounds(&self) -> (DVector<f64>, DVector<f64>);
    fn input_change_weight(&self) -> DMatrix<f64>;
    fn soft_penalty(&self) -> f64;
    /// LQR gain acting on the prediction error `x_hat - x`.
    fn compensator(&self) -> &LqrGain;
    fn exogenous_features(&self, observation: &DVector<f64>) -> Vec<f64>;
    fn exogenous_feature_names(&self) -> Vec<String>;
    fn episode<'a>(&'a self, seeds: &EpisodeSeeds, steps: usize) -> Box<dyn EpisodeEnv + 'a>;
    /// Serialized configuration, used to fingerprint test sets.
    fn config_json(&self) -> serde_json::Value;

    fn nx(&self) -> usize {
        self.ocp_model().nx()
    }

    fn nu(&self) -> usize {
        self.ocp_model().nu()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_round_trip() {
        for kind in [SystemKind::Pendulum, SystemKind::Battery] {
            assert_eq!(kind.to_string().parse::<SystemKind>().unwrap(), kind);
        }
        assert!("rocket".parse::<SystemKind>().is_err());
    }

    #[test]
    fn episode_seeds_are_distinct() {
        let a = EpisodeSeeds::derive(1, 0);
        let b = EpisodeSeeds::derive(1, 1);
        assert_ne!(a, b);
        assert_ne!(a.initial, a.noise);
        assert_eq!(a, EpisodeSeeds::derive(1, 0));
    }

    #[test]
    fn battery_episode_forecast_independent_of_query_order() {
        let sys = Battery::new(BatteryConfig::default()).unwrap();
        let seeds = EpisodeSeeds::derive(5, 2);
        let env = sys.episode(&seeds, 100);
        let late = env.forecast(40, 20);
        let _ = env.forecast(0, 20);
        assert_eq!(env.forecast(40, 20), late);
        assert_eq!(late[0][0], env.observation(40)[0]);
    }
}
