//! Fixed-step integrators with zero-order-hold input.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    #[default]
    Rk4,
    Euler,
}

/// One classical Runge-Kutta step of `xdot = f(x, u)` with `u` held over `dt`.
pub fn rk4_step<F>(f: F, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
{
    let k1 = f(x, u);
    let k2 = f(&(x + &k1 * (0.5 * dt)), u);
    let k3 = f(&(x + &k2 * (0.5 * dt)), u);
    let k4 = f(&(x + &k3 * dt), u);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

pub fn euler_step<F>(f: F, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
{
    x + f(x, u) * dt
}

impl Integrator {
    pub fn step<F>(self, f: F, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> DVector<f64>
    where
        F: Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
    {
        match self {
            Integrator::Rk4 => rk4_step(f, x, u, dt),
            Integrator::Euler => euler_step(f, x, u, dt),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rk4_exponential_growth_matches_to_fifth_order() {
        let x = DVector::from_element(1, 1.0);
        let u = DVector::zeros(0);
        let next = rk4_step(|x, _| x.clone(), &x, &u, 0.1);
        let err = (next[0] - 0.1f64.exp()).abs();
        // local error of RK4 on xdot = x is dt^5/120 ~ 8.5e-8
        assert!(err < 2e-7, "err = {err:e}");
        assert!(err > 0.0);
    }

    #[test]
    fn zero_derivative_is_identity() {
        let x = DVector::from_vec(vec![1.0, -2.0, 3.5]);
        let u = DVector::from_element(1, 4.0);
        let next = rk4_step(|x, _| DVector::zeros(x.len()), &x, &u, 0.1);
        assert_eq!(next, x);
        let next = euler_step(|x, _| DVector::zeros(x.len()), &x, &u, 0.1);
        assert_eq!(next, x);
    }

    #[test]
    fn rk4_holds_input_constant() {
        // xdot = u, so x(dt) = x + u dt exactly
        let x = DVector::from_element(1, 2.0);
        let u = DVector::from_element(1, -3.0);
        let next = Integrator::Rk4.step(|_, u| u.clone(), &x, &u, 0.25);
        assert!((next[0] - (2.0 - 0.75)).abs() < 1e-15);
    }
}
