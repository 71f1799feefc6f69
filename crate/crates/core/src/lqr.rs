//! Discrete LQR synthesis for the plan-tracking compensator.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DARE_TOLERANCE: f64 = 1e-10;
pub const DARE_MAX_ITERATIONS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Discretization {
    #[default]
    Zoh,
    Euler,
}

/// A linear time-invariant model `x+ = A x + B u` (discrete) or `xdot = A x + B u`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiModel {
    pub name: String,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub discrete: bool,
    /// Sample time in seconds, set when the model came from a conversion.
    pub dt: Option<f64>,
}

impl LtiModel {
    pub fn continuous(name: impl Into<String>, a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        check_dims(&a, &b)?;
        Ok(Self {
            name: name.into(),
            a,
            b,
            discrete: false,
            dt: None,
        })
    }

    pub fn discrete(name: impl Into<String>, a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        check_dims(&a, &b)?;
        Ok(Self {
            name: name.into(),
            a,
            b,
            discrete: true,
            dt: None,
        })
    }

    /// Discretizes a continuous model; discrete models are returned unchanged.
    pub fn discretize(&self, dt: f64, method: Discretization) -> Result<Self> {
        if self.discrete {
            return Ok(self.clone());
        }
        if !(dt > 0.0) {
            return Err(Error::Contract(format!(
                "sample time must be positive, got {dt}"
            )));
        }
        let (a, b) = match method {
            Discretization::Zoh => c2d_zoh(&self.a, &self.b, dt),
            Discretization::Euler => c2d_euler(&self.a, &self.b, dt),
        };
        Ok(Self {
            name: self.name.clone(),
            a,
            b,
            discrete: true,
            dt: Some(dt),
        })
    }

    /// The same model with the input direction negated.
    ///
    /// A prediction error `plan - measured` evolves with `-B` under an additive
    /// input correction, so the compensator is synthesized on this model.
    pub fn with_negated_input(&self) -> Self {
        Self {
            b: -&self.b,
            ..self.clone()
        }
    }

    pub fn lqr(&self, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<LqrGain> {
        if !self.discrete {
            return Err(Error::Contract(format!(
                "LQR synthesis needs a discrete model, {} is continuous",
                self.name
            )));
        }
        lqr_gain_named(&self.name, &self.a, &self.b, q, r)
    }
}

fn check_dims(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if !a.is_square() {
        return Err(Error::Dimension {
            context: "state matrix columns",
            expected: a.nrows(),
            got: a.ncols(),
        });
    }
    if b.nrows() != a.nrows() {
        return Err(Error::Dimension {
            context: "input matrix rows",
            expected: a.nrows(),
            got: b.nrows(),
        });
    }
    Ok(())
}

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let norm = m.iter().map(|v| v.abs()).fold(0.0, f64::max) * n as f64;
    let mut squarings = 0u32;
    let mut scaled_norm = norm;
    while scaled_norm > 0.5 {
        scaled_norm *= 0.5;
        squarings += 1;
    }
    let scaled = m / 2f64.powi(squarings as i32);

    let mut sum = DMatrix::<f64>::identity(n, n);
    let mut term = DMatrix::<f64>::identity(n, n);
    for k in 1..40 {
        term = &term * &scaled / k as f64;
        sum += &term;
        // terms shrink at least geometrically by 1/2 once k > 1
        if term.amax() < 1e-18 * sum.amax().max(1.0) {
            break;
        }
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// Zero-order-hold discretization through the exponential of `[[A, B], [0, 0]] dt`.
pub fn c2d_zoh(a: &DMatrix<f64>, b: &DMatrix<f64>, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let m = b.ncols();
    let mut aug = DMatrix::<f64>::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a * dt));
    aug.view_mut((0, n), (n, m)).copy_from(&(b * dt));
    let e = expm(&aug);
    (
        e.view((0, 0), (n, n)).into_owned(),
        e.view((0, n), (n, m)).into_owned(),
    )
}

pub fn c2d_euler(a: &DMatrix<f64>, b: &DMatrix<f64>, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    (DMatrix::identity(n, n) + a * dt, b * dt)
}

/// Right-hand side of the Riccati map `Q + A'PA - A'PB (R + B'PB)^-1 B'PA`.
pub fn riccati_map(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let at_p = a.transpose() * p;
    let bt_p = b.transpose() * p;
    let s = r + &bt_p * b;
    let chol = Cholesky::new(s)
        .ok_or_else(|| Error::Contract("R + B'PB is not positive definite".to_string()))?;
    let gain = chol.solve(&(&bt_p * a));
    let next = q + &at_p * a - (&at_p * b) * gain;
    Ok(symmetrize(next))
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Fixed-point iteration of the discrete algebraic Riccati equation, started from `Q`.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    solve_dare_named("unnamed model", a, b, q, r)
}

fn solve_dare_named(
    name: &str,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    check_dims(a, b)?;
    if q.shape() != a.shape() {
        return Err(Error::Dimension {
            context: "state weight",
            expected: a.nrows(),
            got: q.nrows(),
        });
    }
    if r.nrows() != b.ncols() || !r.is_square() {
        return Err(Error::Dimension {
            context: "input weight",
            expected: b.ncols(),
            got: r.nrows(),
        });
    }
    if Cholesky::new(r.clone()).is_none() {
        return Err(Error::Contract(format!(
            "input weight of {name} is not positive definite"
        )));
    }

    let mut p = q.clone();
    let mut change = f64::INFINITY;
    for _ in 0..DARE_MAX_ITERATIONS {
        let next = riccati_map(a, b, q, r, &p)?;
        change = (&next - &p).amax();
        p = next;
        if !change.is_finite() {
            break;
        }
        if change < DARE_TOLERANCE {
            return Ok(p);
        }
    }
    Err(Error::DareNotConverged {
        model: name.to_string(),
        iterations: DARE_MAX_ITERATIONS,
        last_change: change,
    })
}

/// `max |P - riccati_map(P)|`.
pub fn dare_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<f64> {
    Ok((p - riccati_map(a, b, q, r, p)?).amax())
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Spectral radii of `a_cl` on the part observable through `q` and on the
/// remaining `q`-unobservable invariant subspace.
pub fn split_spectral_radius(a_cl: &DMatrix<f64>, q: &DMatrix<f64>) -> (f64, f64) {
    let n = a_cl.nrows();
    // q is n x n, so the stacked matrix is tall and the SVD yields n right vectors
    let mut obs = DMatrix::<f64>::zeros(n * q.nrows(), n);
    let mut block = q.clone();
    for i in 0..n {
        obs.view_mut((i * q.nrows(), 0), (q.nrows(), n))
            .copy_from(&block);
        block = &block * a_cl;
    }
    let svd = obs.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = smax * 1e-10 * n as f64;
    let mut observed = Vec::new();
    let mut hidden = Vec::new();
    for (i, &s) in svd.singular_values.iter().enumerate() {
        let row = v_t.row(i).transpose();
        if smax > 0.0 && s > tol {
            observed.push(row);
        } else {
            hidden.push(row);
        }
    }
    let restricted = |basis: &[DVector<f64>]| {
        if basis.is_empty() {
            return 0.0;
        }
        let t = DMatrix::from_columns(basis);
        spectral_radius(&(t.transpose() * a_cl * &t))
    };
    (restricted(&observed), restricted(&hidden))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqrGain {
    pub k: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl LqrGain {
    /// Additive correction `-K eps`.
    pub fn compensate(&self, eps: &DVector<f64>) -> DVector<f64> {
        compensate(self, eps)
    }
}

pub fn lqr_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<LqrGain> {
    lqr_gain_named("unnamed model", a, b, q, r)
}

fn lqr_gain_named(
    name: &str,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<LqrGain> {
    let p = solve_dare_named(name, a, b, q, r)?;
    let bt_p = b.transpose() * &p;
    let k = Cholesky::new(r + &bt_p * b)
        .ok_or_else(|| Error::Contract("R + B'PB is not positive definite".to_string()))?
        .solve(&(&bt_p * a));
    let (radius, cost_free_radius) = split_spectral_radius(&(a - b * &k), q);
    // modes the cost cannot see (e.g. an unweighted cart position) may stay marginal
    if !(radius < 1.0) || !(cost_free_radius <= 1.0 + 1e-9) {
        return Err(Error::NotStabilizing {
            model: name.to_string(),
            radius: radius.max(cost_free_radius),
        });
    }
    Ok(LqrGain {
        k,
        p,
        q: q.clone(),
        r: r.clone(),
    })
}

pub fn compensate(gain: &LqrGain, eps: &DVector<f64>) -> DVector<f64> {
    -(&gain.k * eps)
}

/// Backward Riccati recursion for the finite-horizon problem
/// `sum_k x'Qx + u'Ru + x_N' Pf x_N`. Returns the gains `K_0..K_{N-1}` and cost-to-go
/// matrices `P_0..P_N`, with the optimal input `u_k = -K_k x_k`.
pub fn finite_horizon_riccati(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p_terminal: &DMatrix<f64>,
    horizon: usize,
) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)> {
    let mut ps = vec![p_terminal.clone(); horizon + 1];
    let mut ks = vec![DMatrix::zeros(b.ncols(), a.nrows()); horizon];
    for k in (0..horizon).rev() {
        let p_next = &ps[k + 1];
        let bt_p = b.transpose() * p_next;
        let gain = Cholesky::new(r + &bt_p * b)
            .ok_or_else(|| Error::Contract("R + B'PB is not positive definite".to_string()))?
            .solve(&(&bt_p * a));
        ps[k] = symmetrize(q + a.transpose() * p_next * (a - b * &gain));
        ks[k] = gain;
    }
    Ok((ks, ps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrate::rk4_step;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn golden_ratio_fixed_point() {
        let p = solve_dare(&scalar(1.0), &scalar(1.0), &scalar(1.0), &scalar(1.0)).unwrap();
        let golden = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((p[(0, 0)] - golden).abs() < 1e-9);
        let gain = lqr_gain(&scalar(1.0), &scalar(1.0), &scalar(1.0), &scalar(1.0)).unwrap();
        assert!((gain.k[(0, 0)] - golden / (1.0 + golden)).abs() < 1e-9);
        assert!((gain.k[(0, 0)] - 0.6180).abs() < 1e-4);
    }

    #[test]
    fn static_system_gives_q() {
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let p = solve_dare(
            &DMatrix::zeros(2, 2),
            &DMatrix::zeros(2, 1),
            &q,
            &scalar(1.0),
        )
        .unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn scalar_dare_matches_closed_form_root() {
        // A = 1: P^2 B^2 - Q B^2 P - Q R = 0
        let b = -(10.0 / 3600.0) / 10.0;
        let (q, r) = (1.0f64, 0.1f64);
        let b2 = b * b;
        let closed = (q * b2 + (q * q * b2 * b2 + 4.0 * b2 * q * r).sqrt()) / (2.0 * b2);
        let p = solve_dare(&scalar(1.0), &scalar(b), &scalar(q), &scalar(r)).unwrap();
        assert!(
            (p[(0, 0)] - closed).abs() < 1e-9 * closed.max(1.0),
            "{} vs {closed}",
            p[(0, 0)]
        );
    }

    #[test]
    fn non_stabilizable_reports_model() {
        // unstable mode with no input authority never settles
        let err = solve_dare_named(
            "drifter",
            &scalar(2.0),
            &scalar(0.0),
            &scalar(1.0),
            &scalar(1.0),
        )
        .unwrap_err();
        match err {
            Error::DareNotConverged { model, .. } => assert_eq!(model, "drifter"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn zoh_pure_integrator() {
        let (ad, bd) = c2d_zoh(&DMatrix::zeros(2, 2), &DMatrix::identity(2, 2), 0.1);
        assert!((ad - DMatrix::<f64>::identity(2, 2)).amax() < 1e-15);
        assert!((bd - DMatrix::<f64>::identity(2, 2) * 0.1).amax() < 1e-15);
    }

    #[test]
    fn zoh_scalar_exponential() {
        for a in [-3.0, -0.5, 0.7, 4.0] {
            let (ad, bd) = c2d_zoh(&scalar(a), &scalar(1.0), 0.1);
            assert!((ad[(0, 0)] - (a * 0.1f64).exp()).abs() < 1e-12);
            assert!((bd[(0, 0)] - ((a * 0.1f64).exp() - 1.0) / a).abs() < 1e-12);
        }
    }

    #[test]
    fn zoh_semigroup() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 7.9, -0.3]);
        let b = DMatrix::from_row_slice(2, 1, &[0.2, -0.7]);
        let (a1, b1) = c2d_zoh(&a, &b, 0.1);
        let (ah, bh) = c2d_zoh(&a, &b, 0.05);
        assert!((&ah * &ah - &a1).amax() < 1e-8);
        assert!((&ah * &bh + &bh - &b1).amax() < 1e-8);
    }

    #[test]
    fn zoh_matches_rk4_fundamental_matrix() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -4.0, -0.2]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let (ad, bd) = c2d_zoh(&a, &b, 0.1);
        let f = |x: &DVector<f64>, u: &DVector<f64>| &a * x + &b * u;
        let steps = 10;
        for col in 0..3 {
            let (mut x, u) = if col < 2 {
                let mut x = DVector::zeros(2);
                x[col] = 1.0;
                (x, DVector::zeros(1))
            } else {
                (DVector::zeros(2), DVector::from_element(1, 1.0))
            };
            for _ in 0..steps {
                x = rk4_step(f, &x, &u, 0.1 / steps as f64);
            }
            let expected = if col < 2 {
                ad.column(col).into_owned()
            } else {
                bd.column(0).into_owned()
            };
            assert!((x - expected).amax() < 1e-8);
        }
    }

    #[test]
    fn compensation_is_negative_feedback() {
        let gain = LqrGain {
            k: scalar(0.5),
            p: scalar(1.0),
            q: scalar(1.0),
            r: scalar(1.0),
        };
        assert_eq!(compensate(&gain, &DVector::from_element(1, 0.2))[0], -0.1);
        assert_eq!(compensate(&gain, &DVector::zeros(1))[0], 0.0);
    }

    #[test]
    fn finite_horizon_converges_to_dare() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.005, 0.1]);
        let q = DMatrix::identity(2, 2);
        let r = scalar(0.1);
        let p = solve_dare(&a, &b, &q, &r).unwrap();
        let (_, ps) = finite_horizon_riccati(&a, &b, &q, &r, &q, 2000).unwrap();
        assert!((&ps[0] - &p).amax() < 1e-8);
    }

    #[test]
    fn euler_discretization() {
        let (ad, bd) = c2d_euler(&scalar(2.0), &scalar(3.0), 0.1);
        assert!((ad[(0, 0)] - 1.2).abs() < 1e-15);
        assert!((bd[(0, 0)] - 0.3).abs() < 1e-15);
    }
}
