//! Battery storage trading on a fluctuating balance market.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::market::{generate_forecast, generate_market, MarketConfig, MarketSeries};
use super::{EpisodeEnv, EpisodeSeeds, SystemKind, SystemModel};
use crate::error::Result;
use crate::lqr::{LqrGain, LtiModel};
use crate::mpc::{CostExpansion, OcpModel};
use crate::seed::{derive_seed, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatteryConfig {
    /// Capacity `C` (kWh).
    pub capacity: f64,
    /// Sample time `delta` (h).
    pub dt_hours: f64,
    /// Power drawn by one MPC computation (kW).
    pub compute_power: f64,
    /// Fraction of capacity tradeable per step.
    pub trade_fraction: f64,
    /// Expected price used in the terminal value ($/kWh).
    pub mean_price: f64,
    pub horizon: usize,
    pub input_change_weight: f64,
    pub soft_penalty: f64,
    pub init_soc: (f64, f64),
    pub lqr_q: f64,
    pub lqr_r: f64,
    pub market: MarketConfig,
}

impl Default for BatteryConfig {
    fn default() -> Self {
        Self {
            capacity: 10.0,
            dt_hours: 10.0 / 3600.0,
            compute_power: 0.1,
            trade_fraction: 0.1,
            mean_price: 0.5,
            horizon: 20,
            input_change_weight: 0.0,
            soft_penalty: 1e3,
            init_soc: (0.2, 0.8),
            lqr_q: 1.0,
            lqr_r: 0.1,
            market: MarketConfig::default(),
        }
    }
}

impl BatteryConfig {
    pub fn input_limit(&self) -> f64 {
        self.trade_fraction * self.capacity / self.dt_hours
    }
}

/// `x - (delta/C)(u - P - eta_c a)` saturated into `[0, 1]`.
pub fn battery_plant_step(
    cfg: &BatteryConfig,
    x: f64,
    u: f64,
    production: f64,
    recompute: bool,
) -> f64 {
    let draw = if recompute { cfg.compute_power } else { 0.0 };
    let next = x - cfg.dt_hours / cfg.capacity * (u - production - draw);
    next.clamp(0.0, 1.0)
}

/// MPC model with parameters `p = [P_hat, lambda_hat]`.
#[derive(Debug, Clone)]
pub struct BatteryModel {
    pub cfg: BatteryConfig,
}

impl OcpModel for BatteryModel {
    fn nx(&self) -> usize {
        1
    }

    fn nu(&self) -> usize {
        1
    }

    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(
            1,
            x[0] - self.cfg.dt_hours / self.cfg.capacity * (u[0] - p[0]),
        )
    }

    fn dynamics_jacobian(
        &self,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _p: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        (
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, -self.cfg.dt_hours / self.cfg.capacity),
        )
    }

    fn stage_cost(&self, _x: &DVector<f64>, u: &DVector<f64>, p: &DVector<f64>) -> f64 {
        -p[1] * u[0] * self.cfg.dt_hours
    }

    fn stage_cost_expansion(
        &self,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        p: &DVector<f64>,
    ) -> CostExpansion {
        CostExpansion {
            grad_x: DVector::zeros(1),
            grad_u: DVector::from_element(1, -p[1] * self.cfg.dt_hours),
            hess_xx: DMatrix::zeros(1, 1),
            hess_ux: DMatrix::zeros(1, 1),
            hess_uu: DMatrix::zeros(1, 1),
        }
    }

    fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        -self.cfg.mean_price * self.cfg.capacity * x[0]
    }

    fn terminal_cost_expansion(&self, _x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        (
            DVector::from_element(1, -self.cfg.mean_price * self.cfg.capacity),
            DMatrix::zeros(1, 1),
        )
    }

    fn soft_constraint_count(&self) -> usize {
        2
    }

    fn soft_constraints(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![x[0] - 1.0, -x[0]])
    }

    fn soft_constraint_jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_column_slice(2, 1, &[1.0, -1.0])
    }
}

pub struct Battery {
    model: BatteryModel,
    lqr_model: LtiModel,
    compensator: LqrGain,
}

impl Battery {
    pub fn new(cfg: BatteryConfig) -> Result<Self> {
        let b = -cfg.dt_hours / cfg.capacity;
        let lqr_model = LtiModel::discrete(
            "battery storage",
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, b),
        )?;
        let compensator = lqr_model.with_negated_input().lqr(
            &DMatrix::from_element(1, 1, cfg.lqr_q),
            &DMatrix::from_element(1, 1, cfg.lqr_r),
        )?;
        Ok(Self {
            model: BatteryModel { cfg },
            lqr_model,
            compensator,
        })
    }

    pub fn config(&self) -> &BatteryConfig {
        &self.model.cfg
    }

    pub fn lqr_model(&self) -> &LtiModel {
        &self.lqr_model
    }

    pub fn sample_initial_state(&self, rng: &mut impl Rng) -> DVector<f64> {
        let (lo, hi) = self.model.cfg.init_soc;
        let x = if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        };
        DVector::from_element(1, x)
    }

    /// Revenue as a cost: `-lambda u delta`.
    pub fn step_cost(&self, u: f64, price: f64) -> f64 {
        -price * u * self.model.cfg.dt_hours
    }

    pub fn terminal_cost(&self, x: f64) -> f64 {
        -self.model.cfg.mean_price * self.model.cfg.capacity * x
    }

    pub fn market(&self, seeds: &EpisodeSeeds, steps: usize) -> MarketSeries {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds.market);
        generate_market(
            steps,
            self.model.cfg.horizon,
            &self.model.cfg.market,
            &mut rng,
        )
    }
}

pub struct BatteryEpisode<'a> {
    system: &'a Battery,
    initial: DVector<f64>,
    series: MarketSeries,
    forecast_seed: u64,
}

impl EpisodeEnv for BatteryEpisode<'_> {
    fn initial_state(&self) -> DVector<f64> {
        self.initial.clone()
    }

    fn observation(&self, step: usize) -> DVector<f64> {
        DVector::from_vec(vec![self.series.production[step], self.series.price[step]])
    }

    fn forecast(&self, anchor: usize, horizon: usize) -> Vec<DVector<f64>> {
        // one stream per anchor keeps forecasts independent of the recompute schedule
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            self.forecast_seed,
            stream::FORECAST,
            anchor as u64,
        ));
        let f = generate_forecast(
            &self.series,
            anchor,
            horizon,
            &self.system.model.cfg.market,
            &mut rng,
        )
        .expect("series covers every anchor of the episode");
        f.production
            .iter()
            .zip(&f.price)
            .map(|(&p, &l)| DVector::from_vec(vec![p, l]))
            .collect()
    }

    fn plant_step(
        &mut self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        recompute: bool,
        step: usize,
    ) -> DVector<f64> {
        DVector::from_element(
            1,
            battery_plant_step(
                &self.system.model.cfg,
                x[0],
                u[0],
                self.series.production[step],
                recompute,
            ),
        )
    }

    fn step_cost(&self, _x: &DVector<f64>, u: &DVector<f64>, _recompute: bool, step: usize) -> f64 {
        self.system.step_cost(u[0], self.series.price[step])
    }

    fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        self.system.terminal_cost(x[0])
    }

    fn market(&self) -> Option<&MarketSeries> {
        Some(&self.series)
    }
}

impl SystemModel for Battery {
    fn kind(&self) -> SystemKind {
        SystemKind::Battery
    }

    fn ocp_model(&self) -> &dyn OcpModel {
        &self.model
    }

    fn horizon(&self) -> usize {
        self.model.cfg.horizon
    }

    fn input_bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let lim = self.model.cfg.input_limit();
        (
            DVector::from_element(1, -lim),
            DVector::from_element(1, lim),
        )
    }

    fn input_change_weight(&self) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.model.cfg.input_change_weight)
    }

    fn soft_penalty(&self) -> f64 {
        self.model.cfg.soft_penalty
    }

    fn compensator(&self) -> &LqrGain {
        &self.compensator
    }

    fn exogenous_features(&self, observation: &DVector<f64>) -> Vec<f64> {
        let mean = self.model.cfg.mean_price;
        vec![(observation[1] - mean) / mean, observation[0]]
    }

    fn exogenous_feature_names(&self) -> Vec<String> {
        vec!["relative_price".into(), "production".into()]
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.model.cfg).expect("config serializes")
    }

    fn episode<'a>(&'a self, seeds: &EpisodeSeeds, steps: usize) -> Box<dyn EpisodeEnv + 'a> {
        let mut init_rng = ChaCha8Rng::seed_from_u64(seeds.initial);
        Box::new(BatteryEpisode {
            system: self,
            initial: self.sample_initial_state(&mut init_rng),
            series: self.market(seeds, steps),
            forecast_seed: seeds.forecast,
        })
    }
}
