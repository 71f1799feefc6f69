//! Cart pendulum balanced upright by a horizontal force on the cart.

use nalgebra::{DMatrix, DVector, Matrix4, Vector4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{EpisodeEnv, EpisodeSeeds, SystemKind, SystemModel};
use crate::error::Result;
use crate::integrate::Integrator;
use crate::lqr::{Discretization, LqrGain, LtiModel};
use crate::mpc::{CostExpansion, OcpModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PendulumParams {
    /// Pendulum mass (kg).
    pub m: f64,
    /// Cart plus pendulum mass (kg).
    pub total_mass: f64,
    /// Pendulum length (m).
    pub l: f64,
    pub g: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            m: 0.1,
            total_mass: 1.1,
            l: 1.0,
            g: 9.81,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PendulumConfig {
    pub params: PendulumParams,
    /// Sample time (s).
    pub dt: f64,
    pub horizon: usize,
    /// Symmetric force limit (N).
    pub input_limit: f64,
    /// Input-change weight `D`.
    pub input_change_weight: f64,
    /// Per-recompute cost in the episode return.
    pub compute_cost: f64,
    /// Std of the angular-velocity disturbance added after each step.
    pub noise_std: f64,
    pub init_velocity: f64,
    pub init_angle: f64,
    pub init_angular_velocity: f64,
    pub integrator: Integrator,
    pub lqr_q: [f64; 4],
    pub lqr_r: f64,
    pub lqr_discretization: Discretization,
}

impl Default for PendulumConfig {
    fn default() -> Self {
        Self {
            params: PendulumParams::default(),
            dt: 0.1,
            horizon: 20,
            input_limit: 25.0,
            input_change_weight: 1e-4,
            compute_cost: 5e-5,
            noise_std: 1.0,
            init_velocity: 1.0,
            init_angle: 0.78,
            init_angular_velocity: 1.0,
            integrator: Integrator::Rk4,
            lqr_q: [0.0, 1.0, 10.0, 10.0],
            lqr_r: 0.1,
            lqr_discretization: Discretization::Zoh,
        }
    }
}

/// `[eta_dot, v_dot, beta_dot, omega_dot]` for state `[eta, v, beta, omega]` and force `u`.
pub fn pendulum_derivatives(p: &PendulumParams, x: &Vector4<f64>, u: f64) -> Vector4<f64> {
    let (s, c) = x[2].sin_cos();
    let omega = x[3];
    let push = u + p.m * p.l * omega * omega * s;
    let v_dot = (p.m * p.g * s * c - 4.0 / 3.0 * push) / (p.m * c * c - 4.0 / 3.0 * p.total_mass);
    let omega_dot =
        (p.total_mass * p.g * s - c * push) / (4.0 / 3.0 * p.total_mass * p.l - p.m * p.l * c * c);
    Vector4::new(x[1], v_dot, omega, omega_dot)
}

/// Analytic Jacobians of [`pendulum_derivatives`].
pub fn pendulum_jacobian(
    p: &PendulumParams,
    x: &Vector4<f64>,
    u: f64,
) -> (Matrix4<f64>, Vector4<f64>) {
    let (s, c) = x[2].sin_cos();
    let omega = x[3];
    let ml = p.m * p.l;
    let push = u + ml * omega * omega * s;
    let dpush_dbeta = ml * omega * omega * c;
    let dpush_domega = 2.0 * ml * omega * s;

    let nv = p.m * p.g * s * c - 4.0 / 3.0 * push;
    let dv = p.m * c * c - 4.0 / 3.0 * p.total_mass;
    let dnv_dbeta = p.m * p.g * (c * c - s * s) - 4.0 / 3.0 * dpush_dbeta;
    let ddv_dbeta = -2.0 * p.m * c * s;
    let vdot_beta = (dnv_dbeta * dv - nv * ddv_dbeta) / (dv * dv);
    let vdot_omega = -4.0 / 3.0 * dpush_domega / dv;
    let vdot_u = -4.0 / 3.0 / dv;

    let nw = p.total_mass * p.g * s - c * push;
    let dw = 4.0 / 3.0 * p.total_mass * p.l - ml * c * c;
    let dnw_dbeta = p.total_mass * p.g * c + s * push - c * dpush_dbeta;
    let ddw_dbeta = 2.0 * ml * c * s;
    let wdot_beta = (dnw_dbeta * dw - nw * ddw_dbeta) / (dw * dw);
    let wdot_omega = -c * dpush_domega / dw;
    let wdot_u = -c / dw;

    #[rustfmt::skip]
    let jx = Matrix4::new(
        0.0, 1.0, 0.0, 0.0,
        0.0, 0.0, vdot_beta, vdot_omega,
        0.0, 0.0, 0.0, 1.0,
        0.0, 0.0, wdot_beta, wdot_omega,
    );
    (jx, Vector4::new(0.0, vdot_u, 0.0, wdot_u))
}

/// One integration step of the pendulum with its forward sensitivities.
pub fn pendulum_step_with_sensitivity(
    p: &PendulumParams,
    integrator: Integrator,
    x: &Vector4<f64>,
    u: f64,
    dt: f64,
) -> (Vector4<f64>, Matrix4<f64>, Vector4<f64>) {
    let eye = Matrix4::identity();
    match integrator {
        Integrator::Euler => {
            let (jx, ju) = pendulum_jacobian(p, x, u);
            (
                x + pendulum_derivatives(p, x, u) * dt,
                eye + jx * dt,
                ju * dt,
            )
        }
        Integrator::Rk4 => {
            let stage = |xs: &Vector4<f64>, dxs_dx: &Matrix4<f64>, dxs_du: &Vector4<f64>| {
                let k = pendulum_derivatives(p, xs, u);
                let (jx, ju) = pendulum_jacobian(p, xs, u);
                (k, jx * dxs_dx, jx * dxs_du + ju)
            };
            let zero = Vector4::zeros();
            let (k1, k1x, k1u) = stage(x, &eye, &zero);
            let (k2, k2x, k2u) = stage(
                &(x + k1 * (0.5 * dt)),
                &(eye + k1x * (0.5 * dt)),
                &(k1u * (0.5 * dt)),
            );
            let (k3, k3x, k3u) = stage(
                &(x + k2 * (0.5 * dt)),
                &(eye + k2x * (0.5 * dt)),
                &(k2u * (0.5 * dt)),
            );
            let (k4, k4x, k4u) = stage(&(x + k3 * dt), &(eye + k3x * dt), &(k3u * dt));
            let w = dt / 6.0;
            (
                x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * w,
                eye + (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * w,
                (k1u + k2u * 2.0 + k3u * 2.0 + k4u) * w,
            )
        }
    }
}

pub fn pendulum_step(
    p: &PendulumParams,
    integrator: Integrator,
    x: &Vector4<f64>,
    u: f64,
    dt: f64,
) -> Vector4<f64> {
    match integrator {
        Integrator::Euler => x + pendulum_derivatives(p, x, u) * dt,
        Integrator::Rk4 => {
            let f = |x: &Vector4<f64>| pendulum_derivatives(p, x, u);
            let k1 = f(x);
            let k2 = f(&(x + k1 * (0.5 * dt)));
            let k3 = f(&(x + k2 * (0.5 * dt)));
            let k4 = f(&(x + k3 * dt));
            x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
        }
    }
}

/// Small-angle linearization about the upright equilibrium (continuous time).
pub fn small_angle_model(p: &PendulumParams) -> (DMatrix<f64>, DMatrix<f64>) {
    let den = 4.0 / 3.0 * p.total_mass - p.m;
    #[rustfmt::skip]
    let a = DMatrix::from_row_slice(4, 4, &[
        0.0, 1.0, 0.0, 0.0,
        0.0, 0.0, -p.m * p.g / den, 0.0,
        0.0, 0.0, 0.0, 1.0,
        0.0, 0.0, p.total_mass * p.g / (p.l * den), 0.0,
    ]);
    let b = DMatrix::from_column_slice(
        4,
        1,
        &[
            0.0,
            1.0 / (p.total_mass - 0.75 * p.m),
            0.0,
            -1.0 / (p.l * den),
        ],
    );
    (a, b)
}

fn to_v4(x: &DVector<f64>) -> Vector4<f64> {
    Vector4::new(x[0], x[1], x[2], x[3])
}

fn from_v4(x: &Vector4<f64>) -> DVector<f64> {
    DVector::from_column_slice(x.as_slice())
}

/// The MPC model: the noiseless plant with stage cost `beta^2` and terminal `beta_N^2`.
#[derive(Debug, Clone)]
pub struct PendulumModel {
    pub cfg: PendulumConfig,
}

impl OcpModel for PendulumModel {
    fn nx(&self) -> usize {
        4
    }

    fn nu(&self) -> usize {
        1
    }

    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>, _p: &DVector<f64>) -> DVector<f64> {
        from_v4(&pendulum_step(
            &self.cfg.params,
            self.cfg.integrator,
            &to_v4(x),
            u[0],
            self.cfg.dt,
        ))
    }

    fn dynamics_jacobian(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        _p: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let (_, jx, ju) = pendulum_step_with_sensitivity(
            &self.cfg.params,
            self.cfg.integrator,
            &to_v4(x),
            u[0],
            self.cfg.dt,
        );
        (
            DMatrix::from_column_slice(4, 4, jx.as_slice()),
            DMatrix::from_column_slice(4, 1, ju.as_slice()),
        )
    }

    fn stage_cost(&self, x: &DVector<f64>, _u: &DVector<f64>, _p: &DVector<f64>) -> f64 {
        x[2] * x[2]
    }

    fn stage_cost_expansion(
        &self,
        x: &DVector<f64>,
        _u: &DVector<f64>,
        _p: &DVector<f64>,
    ) -> CostExpansion {
        let mut grad_x = DVector::zeros(4);
        grad_x[2] = 2.0 * x[2];
        let mut hess_xx = DMatrix::zeros(4, 4);
        hess_xx[(2, 2)] = 2.0;
        CostExpansion {
            grad_x,
            grad_u: DVector::zeros(1),
            hess_xx,
            hess_ux: DMatrix::zeros(1, 4),
            hess_uu: DMatrix::zeros(1, 1),
        }
    }

    fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        x[2] * x[2]
    }

    fn terminal_cost_expansion(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let mut g = DVector::zeros(4);
        g[2] = 2.0 * x[2];
        let mut h = DMatrix::zeros(4, 4);
        h[(2, 2)] = 2.0;
        (g, h)
    }
}

pub struct Pendulum {
    model: PendulumModel,
    lqr_model: LtiModel,
    compensator: LqrGain,
}

impl Pendulum {
    pub fn new(cfg: PendulumConfig) -> Result<Self> {
        let (a, b) = small_angle_model(&cfg.params);
        let lqr_model = LtiModel::continuous("cart pendulum", a, b)?
            .discretize(cfg.dt, cfg.lqr_discretization)?;
        let q = DMatrix::from_diagonal(&DVector::from_column_slice(&cfg.lqr_q));
        let r = DMatrix::from_element(1, 1, cfg.lqr_r);
        let compensator = lqr_model.with_negated_input().lqr(&q, &r)?;
        Ok(Self {
            model: PendulumModel { cfg },
            lqr_model,
            compensator,
        })
    }

    pub fn config(&self) -> &PendulumConfig {
        &self.model.cfg
    }

    pub fn params(&self) -> &PendulumParams {
        &self.model.cfg.params
    }

    pub fn lqr_model(&self) -> &LtiModel {
        &self.lqr_model
    }

    /// `[0, U(-v0, v0), U(-beta0, beta0), U(-omega0, omega0)]`.
    pub fn sample_initial_state(&self, rng: &mut impl Rng) -> DVector<f64> {
        let c = &self.model.cfg;
        let mut sym = |r: f64| {
            if r > 0.0 {
                rng.random_range(-r..r)
            } else {
                0.0
            }
        };
        DVector::from_vec(vec![
            0.0,
            sym(c.init_velocity),
            sym(c.init_angle),
            sym(c.init_angular_velocity),
        ])
    }

    /// True plant: integration step plus the angular-velocity disturbance.
    pub fn plant_step(&self, x: &DVector<f64>, u: f64, rng: &mut impl Rng) -> DVector<f64> {
        let c = &self.model.cfg;
        let mut next = pendulum_step(&c.params, c.integrator, &to_v4(x), u, c.dt);
        if c.noise_std > 0.0 {
            let normal = Normal::new(0.0, c.noise_std).expect("finite positive std");
            next[3] += normal.sample(rng);
        }
        from_v4(&next)
    }

    pub fn step_cost(&self, x: &DVector<f64>, recompute: bool) -> f64 {
        x[2] * x[2]
            + if recompute {
                self.model.cfg.compute_cost
            } else {
                0.0
            }
    }

    pub fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        x[2] * x[2]
    }
}

struct PendulumEpisode<'a> {
    system: &'a Pendulum,
    initial: DVector<f64>,
    noise: ChaCha8Rng,
}

impl EpisodeEnv for PendulumEpisode<'_> {
    fn initial_state(&self) -> DVector<f64> {
        self.initial.clone()
    }

    fn observation(&self, _step: usize) -> DVector<f64> {
        DVector::zeros(0)
    }

    fn forecast(&self, _anchor: usize, horizon: usize) -> Vec<DVector<f64>> {
        vec![DVector::zeros(0); horizon]
    }

    fn plant_step(
        &mut self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        _recompute: bool,
        _step: usize,
    ) -> DVector<f64> {
        self.system.plant_step(x, u[0], &mut self.noise)
    }

    fn step_cost(&self, x: &DVector<f64>, _u: &DVector<f64>, recompute: bool, _step: usize) -> f64 {
        self.system.step_cost(x, recompute)
    }

    fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        self.system.terminal_cost(x)
    }
}

impl SystemModel for Pendulum {
    fn kind(&self) -> SystemKind {
        SystemKind::Pendulum
    }

    fn ocp_model(&self) -> &dyn OcpModel {
        &self.model
    }

    fn horizon(&self) -> usize {
        self.model.cfg.horizon
    }

    fn input_bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let lim = self.model.cfg.input_limit;
        (
            DVector::from_element(1, -lim),
            DVector::from_element(1, lim),
        )
    }

    fn input_change_weight(&self) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.model.cfg.input_change_weight)
    }

    fn soft_penalty(&self) -> f64 {
        0.0
    }

    fn compensator(&self) -> &LqrGain {
        &self.compensator
    }

    fn exogenous_features(&self, _observation: &DVector<f64>) -> Vec<f64> {
        Vec::new()
    }

    fn exogenous_feature_names(&self) -> Vec<String> {
        Vec::new()
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.model.cfg).expect("config serializes")
    }

    fn episode<'a>(&'a self, seeds: &EpisodeSeeds, _steps: usize) -> Box<dyn EpisodeEnv + 'a> {
        let mut init_rng = ChaCha8Rng::seed_from_u64(seeds.initial);
        Box::new(PendulumEpisode {
            system: self,
            initial: self.sample_initial_state(&mut init_rng),
            noise: ChaCha8Rng::seed_from_u64(seeds.noise),
        })
    }
}
