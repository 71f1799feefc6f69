#![allow(dead_code)]

use etmpc::mpc::{OcpModel, OcpSpec, SolverSettings};
use etmpc::systems::SystemModel;
use nalgebra::{DMatrix, DVector};

pub fn unconstrained<'a>(model: &'a dyn OcpModel, horizon: usize) -> OcpSpec<'a> {
    let nu = model.nu();
    OcpSpec {
        model,
        horizon,
        input_change_weight: DMatrix::zeros(nu, nu),
        u_lower: DVector::from_element(nu, f64::NEG_INFINITY),
        u_upper: DVector::from_element(nu, f64::INFINITY),
        soft_penalty: 0.0,
        forecast: vec![DVector::zeros(0); horizon],
        u_prev: DVector::zeros(nu),
        settings: SolverSettings::default(),
    }
}

/// The OCP the closed loop would pose for `system` at an anchor with this forecast.
pub fn system_spec<'a>(
    system: &'a dyn SystemModel,
    forecast: Vec<DVector<f64>>,
    u_prev: DVector<f64>,
) -> OcpSpec<'a> {
    let (u_lower, u_upper) = system.input_bounds();
    OcpSpec {
        model: system.ocp_model(),
        horizon: system.horizon(),
        input_change_weight: system.input_change_weight(),
        u_lower,
        u_upper,
        soft_penalty: system.soft_penalty(),
        forecast,
        u_prev,
        settings: SolverSettings::default(),
    }
}

pub fn median(mut v: Vec<usize>) -> f64 {
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}
