//! Finite-horizon optimal control by direct multiple shooting and SQP.
//!
//! States and inputs are both decision variables. Each iteration linearizes the
//! dynamics, condenses the QP onto the input steps, and solves it with the dense
//! dual active-set solver in [`crate::qp`]. The Hessian is the (convex) cost
//! Hessian without constraint curvature, plus a small proximal damping term.
//! Steps are globalized by backtracking on an L1 merit function.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qp::{self, Qp};

/// Local quadratic model of a stage cost at `(x, u)`.
#[derive(Debug, Clone)]
pub struct CostExpansion {
    pub grad_x: DVector<f64>,
    pub grad_u: DVector<f64>,
    pub hess_xx: DMatrix<f64>,
    /// `d^2 l / du dx`, shape `nu x nx`.
    pub hess_ux: DMatrix<f64>,
    pub hess_uu: DMatrix<f64>,
}

/// Discrete-time model and costs of an optimal control problem.
///
/// Cost Hessians must be positive semidefinite; they are used as-is in the QP.
pub trait OcpModel: Send + Sync {
    fn nx(&self) -> usize;
    fn nu(&self) -> usize;

    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>, p: &DVector<f64>) -> DVector<f64>;

    /// `(df/dx, df/du)`. Defaults to central differences.
    fn dynamics_jacobian(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        p: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        finite_difference_jacobian(self, x, u, p)
    }

    fn stage_cost(&self, x: &DVector<f64>, u: &DVector<f64>, p: &DVector<f64>) -> f64;
    fn stage_cost_expansion(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        p: &DVector<f64>,
    ) -> CostExpansion;

    fn terminal_cost(&self, x: &DVector<f64>) -> f64;
    /// Gradient and Hessian of the terminal cost.
    fn terminal_cost_expansion(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>);

    /// Number of soft state constraints `h(x) <= 0` imposed on `x_1..x_N`.
    fn soft_constraint_count(&self) -> usize {
        0
    }
    fn soft_constraints(&self, _x: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(0)
    }
    fn soft_constraint_jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(0, self.nx())
    }
}

pub const FD_STEP: f64 = 1e-6;

/// Central finite-difference Jacobians of the discrete dynamics.
pub fn finite_difference_jacobian<M: OcpModel + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    u: &DVector<f64>,
    p: &DVector<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let nx = x.len();
    let nu = u.len();
    let mut jx = DMatrix::zeros(nx, nx);
    let mut ju = DMatrix::zeros(nx, nu);
    for i in 0..nx {
        let h = FD_STEP * x[i].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        let col = (model.dynamics(&xp, u, p) - model.dynamics(&xm, u, p)) / (2.0 * h);
        jx.set_column(i, &col);
    }
    for i in 0..nu {
        let h = FD_STEP * u[i].abs().max(1.0);
        let mut up = u.clone();
        let mut um = u.clone();
        up[i] += h;
        um[i] -= h;
        let col = (model.dynamics(x, &up, p) - model.dynamics(x, &um, p)) / (2.0 * h);
        ju.set_column(i, &col);
    }
    (jx, ju)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub max_iterations: usize,
    pub kkt_tolerance: f64,
    pub gap_tolerance: f64,
    /// Proximal damping added to the condensed Hessian.
    pub regularization: f64,
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            kkt_tolerance: 1e-6,
            gap_tolerance: 1e-8,
            regularization: 1e-9,
            backtrack_factor: 0.5,
            max_backtracks: 20,
        }
    }
}

/// One instance of the optimal control problem.
#[derive(Clone)]
pub struct OcpSpec<'a> {
    pub model: &'a dyn OcpModel,
    pub horizon: usize,
    /// Weight `D` of the input-change term `du' D du`.
    pub input_change_weight: DMatrix<f64>,
    pub u_lower: DVector<f64>,
    pub u_upper: DVector<f64>,
    /// L1 weight on soft state-constraint violation.
    pub soft_penalty: f64,
    /// Parameter forecast `p_0..p_{N-1}`.
    pub forecast: Vec<DVector<f64>>,
    /// Input applied before the horizon starts, for the first input-change term.
    pub u_prev: DVector<f64>,
    pub settings: SolverSettings,
}

impl OcpSpec<'_> {
    pub fn validate(&self) -> Result<()> {
        let nu = self.model.nu();
        if self.horizon == 0 {
            return Err(Error::Contract("horizon must be at least 1".into()));
        }
        if self.forecast.len() != self.horizon {
            return Err(Error::Dimension {
                context: "forecast length",
                expected: self.horizon,
                got: self.forecast.len(),
            });
        }
        for (name, v) in [
            ("lower bound", &self.u_lower),
            ("upper bound", &self.u_upper),
            ("previous input", &self.u_prev),
        ] {
            if v.len() != nu {
                return Err(Error::Contract(format!(
                    "{name} has {} entries, model has {nu} inputs",
                    v.len()
                )));
            }
        }
        if self.input_change_weight.shape() != (nu, nu) {
            return Err(Error::Contract(
                "input-change weight must be nu x nu".into(),
            ));
        }
        if self
            .u_lower
            .iter()
            .zip(self.u_upper.iter())
            .any(|(l, h)| l > h)
        {
            return Err(Error::Contract(
                "input lower bound exceeds upper bound".into(),
            ));
        }
        if self.model.soft_constraint_count() > 0 && !(self.soft_penalty > 0.0) {
            return Err(Error::Contract(
                "soft constraints need a positive penalty weight".into(),
            ));
        }
        Ok(())
    }

    fn clip(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(u.len(), |i, _| u[i].clamp(self.u_lower[i], self.u_upper[i]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlpSolution {
    /// `x_0..x_N`.
    pub states: Vec<DVector<f64>>,
    /// `u_0..u_{N-1}`.
    pub inputs: Vec<DVector<f64>>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Soft-constraint multipliers for `x_1..x_N` (index 0 unused).
    pub soft_duals: Vec<DVector<f64>>,
}

impl NlpSolution {
    pub fn horizon(&self) -> usize {
        self.inputs.len()
    }

    /// Largest shooting gap `|x_{k+1} - f(x_k, u_k, p_k)|`.
    pub fn max_gap(&self, spec: &OcpSpec<'_>) -> f64 {
        (0..self.horizon())
            .map(|k| {
                (spec
                    .model
                    .dynamics(&self.states[k], &self.inputs[k], &spec.forecast[k])
                    - &self.states[k + 1])
                    .amax()
            })
            .fold(0.0, f64::max)
    }
}

/// Per-iteration record for diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub objective: f64,
    pub merit: f64,
    pub kkt_residual: f64,
    pub max_gap: f64,
    pub step_length: f64,
    pub regularization: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub iterations: Vec<IterationLog>,
}

struct Linearization {
    a: Vec<DMatrix<f64>>,
    b: Vec<DMatrix<f64>>,
    gaps: Vec<DVector<f64>>,
    stage: Vec<CostExpansion>,
    terminal_grad: DVector<f64>,
    terminal_hess: DMatrix<f64>,
    soft_h: Vec<DVector<f64>>,
    soft_jac: Vec<DMatrix<f64>>,
}

struct Iterate {
    states: Vec<DVector<f64>>,
    inputs: Vec<DVector<f64>>,
}

fn all_finite_vec(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn all_finite_mat(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

fn smooth_objective(spec: &OcpSpec<'_>, it: &Iterate) -> f64 {
    let n = spec.horizon;
    let mut total = 0.0;
    let mut prev = &spec.u_prev;
    for k in 0..n {
        total += spec
            .model
            .stage_cost(&it.states[k], &it.inputs[k], &spec.forecast[k]);
        let du = &it.inputs[k] - prev;
        total += du.dot(&(&spec.input_change_weight * &du));
        prev = &it.inputs[k];
    }
    total + spec.model.terminal_cost(&it.states[n])
}

fn soft_violation(spec: &OcpSpec<'_>, it: &Iterate) -> f64 {
    if spec.model.soft_constraint_count() == 0 {
        return 0.0;
    }
    (1..=spec.horizon)
        .map(|k| {
            spec.model
                .soft_constraints(&it.states[k])
                .iter()
                .map(|h| h.max(0.0))
                .sum::<f64>()
        })
        .sum()
}

fn objective(spec: &OcpSpec<'_>, it: &Iterate) -> f64 {
    smooth_objective(spec, it) + spec.soft_penalty * soft_violation(spec, it)
}

fn gap_l1(spec: &OcpSpec<'_>, it: &Iterate) -> (f64, f64) {
    let mut l1 = 0.0;
    let mut linf: f64 = 0.0;
    for k in 0..spec.horizon {
        let g = spec
            .model
            .dynamics(&it.states[k], &it.inputs[k], &spec.forecast[k])
            - &it.states[k + 1];
        l1 += g.lp_norm(1);
        linf = linf.max(g.amax());
    }
    (l1, linf)
}

fn linearize(spec: &OcpSpec<'_>, it: &Iterate) -> Result<Linearization> {
    let n = spec.horizon;
    let model = spec.model;
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    let mut gaps = Vec::with_capacity(n);
    let mut stage = Vec::with_capacity(n);
    for k in 0..n {
        let (x, u, p) = (&it.states[k], &it.inputs[k], &spec.forecast[k]);
        let next = model.dynamics(x, u, p);
        let (ak, bk) = model.dynamics_jacobian(x, u, p);
        let exp = model.stage_cost_expansion(x, u, p);
        if !all_finite_vec(&next)
            || !all_finite_mat(&ak)
            || !all_finite_mat(&bk)
            || !all_finite_vec(&exp.grad_x)
            || !all_finite_vec(&exp.grad_u)
        {
            return Err(Error::Solver(format!(
                "non-finite model evaluation at stage {k}"
            )));
        }
        gaps.push(next - &it.states[k + 1]);
        a.push(ak);
        b.push(bk);
        stage.push(exp);
    }
    let (terminal_grad, terminal_hess) = model.terminal_cost_expansion(&it.states[n]);
    if !all_finite_vec(&terminal_grad) {
        return Err(Error::Solver("non-finite terminal cost gradient".into()));
    }
    let mut soft_h = vec![DVector::zeros(0)];
    let mut soft_jac = vec![DMatrix::zeros(0, model.nx())];
    if model.soft_constraint_count() > 0 {
        for k in 1..=n {
            soft_h.push(model.soft_constraints(&it.states[k]));
            soft_jac.push(model.soft_constraint_jacobian(&it.states[k]));
        }
    }
    Ok(Linearization {
        a,
        b,
        gaps,
        stage,
        terminal_grad,
        terminal_hess,
        soft_h,
        soft_jac,
    })
}

/// Gradient of the input-change terms with respect to each `u_k`.
fn input_change_gradient(spec: &OcpSpec<'_>, inputs: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let n = spec.horizon;
    let d = &spec.input_change_weight;
    let d_sym = d + d.transpose();
    let mut grads = vec![DVector::zeros(spec.model.nu()); n];
    let mut prev = &spec.u_prev;
    for k in 0..n {
        let g = &d_sym * (&inputs[k] - prev);
        grads[k] += &g;
        if k > 0 {
            grads[k - 1] -= &g;
        }
        prev = &inputs[k];
    }
    grads
}

fn soft_dual_estimate(
    spec: &OcpSpec<'_>,
    h: &DVector<f64>,
    stored: Option<&DVector<f64>>,
) -> DVector<f64> {
    let w = spec.soft_penalty;
    DVector::from_fn(h.len(), |j, _| {
        if h[j] > 1e-9 {
            w
        } else if h[j] < -1e-9 {
            0.0
        } else {
            stored
                .map_or(0.0, |s| s.get(j).copied().unwrap_or(0.0))
                .clamp(0.0, w)
        }
    })
}

/// Projected reduced gradient on the inputs, with the costate recursion supplying
/// the dynamics multipliers; plus primal infeasibility.
fn kkt_from_linearization(
    spec: &OcpSpec<'_>,
    it: &Iterate,
    lin: &Linearization,
    x_bar: &DVector<f64>,
    soft_duals: Option<&[DVector<f64>]>,
) -> f64 {
    let n = spec.horizon;
    let has_soft = spec.model.soft_constraint_count() > 0;
    let soft_term = |k: usize| -> Option<DVector<f64>> {
        if !has_soft {
            return None;
        }
        let nu = soft_dual_estimate(spec, &lin.soft_h[k], soft_duals.and_then(|s| s.get(k)));
        Some(lin.soft_jac[k].transpose() * nu)
    };

    let du_grad = input_change_gradient(spec, &it.inputs);
    let mut costate = lin.terminal_grad.clone();
    if let Some(t) = soft_term(n) {
        costate += t;
    }
    let mut residual: f64 = 0.0;
    for k in (0..n).rev() {
        let g_u = &lin.stage[k].grad_u + &du_grad[k] + lin.b[k].transpose() * &costate;
        let u = &it.inputs[k];
        for i in 0..u.len() {
            let projected = (u[i] - g_u[i]).clamp(spec.u_lower[i], spec.u_upper[i]);
            residual = residual.max((u[i] - projected).abs());
            residual = residual.max(
                (spec.u_lower[i] - u[i])
                    .max(u[i] - spec.u_upper[i])
                    .max(0.0),
            );
        }
        if k > 0 {
            let mut next = &lin.stage[k].grad_x + lin.a[k].transpose() * &costate;
            if let Some(t) = soft_term(k) {
                next += t;
            }
            costate = next;
        }
    }
    let gap = lin.gaps.iter().map(|g| g.amax()).fold(0.0, f64::max);
    let init = (&it.states[0] - x_bar).amax();
    residual.max(gap).max(init)
}

/// KKT residual of a candidate point: projected Lagrangian gradient on the inputs
/// plus shooting-gap, initial-condition, and bound violations.
pub fn kkt_residual(spec: &OcpSpec<'_>, x_bar: &DVector<f64>, point: &NlpSolution) -> Result<f64> {
    spec.validate()?;
    let it = Iterate {
        states: point.states.clone(),
        inputs: point.inputs.clone(),
    };
    let lin = linearize(spec, &it)?;
    Ok(kkt_from_linearization(
        spec,
        &it,
        &lin,
        x_bar,
        Some(&point.soft_duals),
    ))
}

struct QpStep {
    dx: Vec<DVector<f64>>,
    du: Vec<DVector<f64>>,
    soft_duals: Vec<DVector<f64>>,
    /// Linearized objective change plus modeled soft-penalty change.
    linear_decrease: f64,
    max_costate: f64,
}

fn solve_qp_step(
    spec: &OcpSpec<'_>,
    it: &Iterate,
    lin: &Linearization,
    rho: f64,
) -> Result<QpStep> {
    let n = spec.horizon;
    let nx = spec.model.nx();
    let nu = spec.model.nu();
    let nv = n * nu;
    let nc = spec.model.soft_constraint_count();
    let n_slack = if nc > 0 { n * nc } else { 0 };
    let nz = nv + n_slack;

    // dx_k = xi_k + gamma_k du; x_0 is pinned so xi_0 = 0.
    let mut xi = vec![DVector::zeros(nx); n + 1];
    let mut gamma = vec![DMatrix::zeros(nx, nv); n + 1];
    for k in 0..n {
        xi[k + 1] = &lin.a[k] * &xi[k] + &lin.gaps[k];
        let mut g = &lin.a[k] * &gamma[k];
        {
            let mut block = g.view_mut((0, k * nu), (nx, nu));
            block += &lin.b[k];
        }
        gamma[k + 1] = g;
    }

    let mut h = DMatrix::<f64>::zeros(nz, nz);
    let mut c = DVector::<f64>::zeros(nz);
    for k in 0..=n {
        let (gx, hxx) = if k < n {
            (&lin.stage[k].grad_x, &lin.stage[k].hess_xx)
        } else {
            (&lin.terminal_grad, &lin.terminal_hess)
        };
        if k > 0 {
            let gt_h = gamma[k].transpose() * hxx;
            let mut hv = h.view_mut((0, 0), (nv, nv));
            hv += &gt_h * &gamma[k];
            let mut cv = c.rows_mut(0, nv);
            cv += gamma[k].transpose() * (gx + hxx * &xi[k]);
        }
        if k < n {
            let st = &lin.stage[k];
            let cross = &st.hess_ux * &gamma[k];
            {
                let mut rows = h.view_mut((k * nu, 0), (nu, nv));
                rows += &cross;
            }
            {
                let mut cols = h.view_mut((0, k * nu), (nv, nu));
                cols += cross.transpose();
            }
            {
                let mut diag = h.view_mut((k * nu, k * nu), (nu, nu));
                diag += &st.hess_uu;
            }
            let mut cu = c.rows_mut(k * nu, nu);
            cu += &st.grad_u + &st.hess_ux * &xi[k];
        }
    }
    // input-change terms are exactly quadratic in u
    let d_sym = &spec.input_change_weight + spec.input_change_weight.transpose();
    for k in 0..n {
        {
            let mut blk = h.view_mut((k * nu, k * nu), (nu, nu));
            blk += &d_sym;
        }
        if k > 0 {
            {
                let mut blk = h.view_mut((k * nu, (k - 1) * nu), (nu, nu));
                blk -= &d_sym;
            }
            let mut blk = h.view_mut(((k - 1) * nu, k * nu), (nu, nu));
            blk -= &d_sym;
        }
    }
    let du_grad = input_change_gradient(spec, &it.inputs);
    for k in 0..n {
        let mut cu = c.rows_mut(k * nu, nu);
        cu += &du_grad[k];
    }
    let scale = (0..nv)
        .map(|i| h[(i, i)].abs())
        .fold(0.0, f64::max)
        .max(1.0);
    for i in 0..nz {
        h[(i, i)] += rho * scale;
    }
    for i in nv..nz {
        c[i] = spec.soft_penalty;
    }

    // constraints a'z >= b
    let m = 2 * nv + 2 * n_slack;
    let mut a = DMatrix::<f64>::zeros(m, nz);
    let mut b = DVector::<f64>::zeros(m);
    let mut row = 0;
    for k in 0..n {
        for i in 0..nu {
            let col = k * nu + i;
            a[(row, col)] = 1.0;
            b[row] = spec.u_lower[i] - it.inputs[k][i];
            row += 1;
            a[(row, col)] = -1.0;
            b[row] = it.inputs[k][i] - spec.u_upper[i];
            row += 1;
        }
    }
    let mut slack_bound_rows = Vec::with_capacity(n_slack);
    let soft_row_start = row + n_slack;
    if nc > 0 {
        for s in 0..n_slack {
            a[(row, nv + s)] = 1.0;
            slack_bound_rows.push(row);
            row += 1;
        }
        for k in 1..=n {
            let jac = &lin.soft_jac[k];
            let jg = jac * &gamma[k];
            let base = &lin.soft_h[k] + jac * &xi[k];
            for j in 0..nc {
                let s = (k - 1) * nc + j;
                a[(row, nv + s)] = 1.0;
                for col in 0..nv {
                    a[(row, col)] = -jg[(j, col)];
                }
                b[row] = base[j];
                row += 1;
            }
        }
    }
    debug_assert_eq!(row, m);

    // indefinite curvature from the dynamics is shifted until the input block factors
    let mut shift = 0.0;
    while h.view((0, 0), (nv, nv)).into_owned().cholesky().is_none() {
        let add = if shift == 0.0 {
            1e-8 * scale
        } else {
            shift * 9.0
        };
        if !(add.is_finite()) || shift > 1e12 * scale {
            return Err(Error::Solver(
                "condensed hessian cannot be made positive definite".into(),
            ));
        }
        for i in 0..nv {
            h[(i, i)] += add;
        }
        shift += add;
    }

    let sol = qp::solve(&Qp {
        hessian: &h,
        linear: &c,
        a: &a,
        b: &b,
        initial_active: &slack_bound_rows,
    })?;
    if !all_finite_vec(&sol.x) {
        return Err(Error::Solver("qp returned a non-finite step".into()));
    }

    let du: Vec<DVector<f64>> = (0..n)
        .map(|k| sol.x.rows(k * nu, nu).into_owned())
        .collect();
    let dz = sol.x.rows(0, nv).into_owned();
    let dx: Vec<DVector<f64>> = (0..=n).map(|k| &xi[k] + &gamma[k] * &dz).collect();

    let mut soft_duals = vec![DVector::zeros(0)];
    if nc > 0 {
        for k in 1..=n {
            soft_duals.push(DVector::from_fn(nc, |j, _| {
                sol.multipliers[soft_row_start + (k - 1) * nc + j]
            }));
        }
    }

    // model decrease of the smooth objective (first order) and of the soft penalty
    let mut lin_change = 0.0;
    for k in 0..n {
        lin_change += lin.stage[k].grad_x.dot(&dx[k])
            + lin.stage[k].grad_u.dot(&du[k])
            + du_grad[k].dot(&du[k]);
    }
    lin_change += lin.terminal_grad.dot(&dx[n]);
    if nc > 0 {
        let slack_sum: f64 = sol.x.rows(nv, n_slack).iter().map(|s| s.max(0.0)).sum();
        let current: f64 = (1..=n)
            .map(|k| lin.soft_h[k].iter().map(|h| h.max(0.0)).sum::<f64>())
            .sum();
        lin_change += spec.soft_penalty * (slack_sum - current);
    }

    // costate of the QP solution bounds the multipliers of the shooting constraints
    let mut costate = &lin.terminal_grad + &lin.terminal_hess * &dx[n];
    if nc > 0 {
        costate += lin.soft_jac[n].transpose() * &soft_duals[n];
    }
    let mut max_costate = costate.amax();
    for k in (1..n).rev() {
        let st = &lin.stage[k];
        let mut next = &st.grad_x
            + &st.hess_xx * &dx[k]
            + st.hess_ux.transpose() * &du[k]
            + lin.a[k].transpose() * &costate;
        if nc > 0 {
            next += lin.soft_jac[k].transpose() * &soft_duals[k];
        }
        costate = next;
        max_costate = max_costate.max(costate.amax());
    }

    Ok(QpStep {
        dx,
        du,
        soft_duals,
        linear_decrease: lin_change,
        max_costate,
    })
}

/// Solves the OCP from measured state `x_bar`.
///
/// Without a warm start the states are initialized at `x_bar` and the inputs at
/// zero (projected onto the bounds). A warm start supplies both; its first state
/// is replaced by `x_bar`.
pub fn solve_ocp(
    spec: &OcpSpec<'_>,
    x_bar: &DVector<f64>,
    warm_start: Option<&NlpSolution>,
) -> Result<NlpSolution> {
    solve_ocp_with_diagnostics(spec, x_bar, warm_start, None)
}

pub fn solve_ocp_with_diagnostics(
    spec: &OcpSpec<'_>,
    x_bar: &DVector<f64>,
    warm_start: Option<&NlpSolution>,
    mut diagnostics: Option<&mut SolveDiagnostics>,
) -> Result<NlpSolution> {
    spec.validate()?;
    let n = spec.horizon;
    let nx = spec.model.nx();
    let nu = spec.model.nu();
    if x_bar.len() != nx {
        return Err(Error::Dimension {
            context: "measured state",
            expected: nx,
            got: x_bar.len(),
        });
    }
    if !all_finite_vec(x_bar) {
        return Err(Error::Solver("measured state is not finite".into()));
    }

    let mut it = match warm_start {
        Some(ws) if ws.horizon() == n && ws.states.len() == n + 1 => {
            let mut states = ws.states.clone();
            states[0] = x_bar.clone();
            Iterate {
                states,
                inputs: ws.inputs.iter().map(|u| spec.clip(u)).collect(),
            }
        }
        _ => Iterate {
            states: vec![x_bar.clone(); n + 1],
            inputs: vec![spec.clip(&DVector::zeros(nu)); n],
        },
    };
    let mut soft_duals: Vec<DVector<f64>> = warm_start
        .filter(|ws| ws.soft_duals.len() == n + 1)
        .map(|ws| ws.soft_duals.clone())
        .unwrap_or_else(|| vec![DVector::zeros(0); n + 1]);

    let settings = spec.settings;
    let mut rho = settings.regularization;
    let mut penalty: f64 = 1.0;
    let mut kkt = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < settings.max_iterations {
        let lin = linearize(spec, &it)?;
        kkt = kkt_from_linearization(spec, &it, &lin, x_bar, Some(&soft_duals));
        let max_gap = lin.gaps.iter().map(|g| g.amax()).fold(0.0, f64::max);
        if kkt <= settings.kkt_tolerance && max_gap <= settings.gap_tolerance {
            converged = true;
            break;
        }
        iterations += 1;

        let step = match solve_qp_step(spec, &it, &lin, rho) {
            Ok(step) => step,
            Err(Error::Solver(_)) if rho < 1e6 => {
                rho = (rho * 100.0).max(1e-6);
                continue;
            }
            Err(e) => return Err(e),
        };
        penalty = penalty.max(1.1 * step.max_costate + 1e-6);

        let obj0 = objective(spec, &it);
        let (gap0, _) = gap_l1(spec, &it);
        if !obj0.is_finite() {
            return Err(Error::Solver("objective is not finite".into()));
        }
        let merit0 = obj0 + penalty * gap0;
        let slope = (step.linear_decrease - penalty * gap0).min(0.0);

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=settings.max_backtracks {
            let trial = Iterate {
                states: it
                    .states
                    .iter()
                    .zip(&step.dx)
                    .map(|(x, d)| x + d * alpha)
                    .collect(),
                inputs: it
                    .inputs
                    .iter()
                    .zip(&step.du)
                    .map(|(u, d)| spec.clip(&(u + d * alpha)))
                    .collect(),
            };
            let obj = objective(spec, &trial);
            let (gap, _) = gap_l1(spec, &trial);
            let merit = obj + penalty * gap;
            if merit.is_finite() && merit <= merit0 + 1e-4 * alpha * slope + 1e-15 * merit0.abs() {
                accepted = Some((trial, obj, merit));
                break;
            }
            alpha *= settings.backtrack_factor;
        }

        match accepted {
            Some((trial, obj, merit)) => {
                it = trial;
                soft_duals = step.soft_duals;
                if let Some(d) = diagnostics.as_deref_mut() {
                    d.iterations.push(IterationLog {
                        iteration: iterations,
                        objective: obj,
                        merit,
                        kkt_residual: kkt,
                        max_gap,
                        step_length: alpha,
                        regularization: rho,
                    });
                }
                // damping grows while the model over-predicts and relaxes after full steps,
                // which shortens steps along the flat input directions only
                rho = if alpha < 1.0 {
                    (rho * 4.0).max(1e-5)
                } else {
                    (rho * 0.5).max(settings.regularization)
                };
            }
            None => {
                if rho >= 1e6 {
                    break;
                }
                rho = (rho * 100.0).max(1e-6);
            }
        }
    }

    if !converged {
        let lin = linearize(spec, &it)?;
        kkt = kkt_from_linearization(spec, &it, &lin, x_bar, Some(&soft_duals));
        let max_gap = lin.gaps.iter().map(|g| g.amax()).fold(0.0, f64::max);
        converged = kkt <= settings.kkt_tolerance && max_gap <= settings.gap_tolerance;
    }
    let objective = objective(spec, &it);
    Ok(NlpSolution {
        states: it.states,
        inputs: it.inputs,
        objective,
        kkt_residual: kkt,
        iterations,
        converged,
        soft_duals,
    })
}

/// Shifts a previous solution left by `n_applied` stages for use as a warm start.
/// The tail repeats the last input and forward-simulates the states with the
/// forecast of `spec`.
pub fn shift_warm_start(
    spec: &OcpSpec<'_>,
    prev: &NlpSolution,
    n_applied: usize,
) -> Result<NlpSolution> {
    let n = prev.horizon();
    if n != spec.horizon {
        return Err(Error::Dimension {
            context: "warm start horizon",
            expected: spec.horizon,
            got: n,
        });
    }
    if n_applied > n {
        return Err(Error::Contract(format!(
            "cannot shift a horizon-{n} solution by {n_applied}"
        )));
    }
    if n_applied == 0 {
        return Ok(prev.clone());
    }
    let last_u = prev.inputs[n - 1].clone();
    let mut states: Vec<DVector<f64>> = prev.states[n_applied..].to_vec();
    let mut inputs: Vec<DVector<f64>> = prev.inputs[n_applied..].to_vec();
    while inputs.len() < n {
        let k = inputs.len();
        let x = states.last().expect("at least the final state remains");
        let next = spec.model.dynamics(x, &last_u, &spec.forecast[k]);
        inputs.push(last_u.clone());
        states.push(next);
    }
    let mut soft_duals: Vec<DVector<f64>> = Vec::with_capacity(n + 1);
    if prev.soft_duals.len() == n + 1 {
        soft_duals.extend(prev.soft_duals[n_applied..].iter().cloned());
        let fill = prev.soft_duals[n].clone();
        while soft_duals.len() < n + 1 {
            soft_duals.push(fill.clone());
        }
        soft_duals[0] = DVector::zeros(0);
    }
    Ok(NlpSolution {
        states,
        inputs,
        objective: f64::NAN,
        kkt_residual: f64::NAN,
        iterations: 0,
        converged: false,
        soft_duals,
    })
}

/// Linear dynamics with quadratic costs `x'Qx + u'Ru` and `x_N' P_f x_N`.
#[derive(Debug, Clone)]
pub struct LinearQuadratic {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p_terminal: DMatrix<f64>,
}

impl OcpModel for LinearQuadratic {
    fn nx(&self) -> usize {
        self.a.nrows()
    }

    fn nu(&self) -> usize {
        self.b.ncols()
    }

    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>, _p: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }

    fn dynamics_jacobian(
        &self,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _p: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.a.clone(), self.b.clone())
    }

    fn stage_cost(&self, x: &DVector<f64>, u: &DVector<f64>, _p: &DVector<f64>) -> f64 {
        x.dot(&(&self.q * x)) + u.dot(&(&self.r * u))
    }

    fn stage_cost_expansion(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        _p: &DVector<f64>,
    ) -> CostExpansion {
        let q2 = &self.q + self.q.transpose();
        let r2 = &self.r + self.r.transpose();
        CostExpansion {
            grad_x: &q2 * x,
            grad_u: &r2 * u,
            hess_xx: q2,
            hess_ux: DMatrix::zeros(self.nu(), self.nx()),
            hess_uu: r2,
        }
    }

    fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.p_terminal * x))
    }

    fn terminal_cost_expansion(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let p2 = &self.p_terminal + self.p_terminal.transpose();
        (&p2 * x, p2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn two_step() -> LinearQuadratic {
        LinearQuadratic {
            a: scalar(1.0),
            b: scalar(1.0),
            q: scalar(1.0),
            r: scalar(1.0),
            p_terminal: scalar(1.0),
        }
    }

    fn unconstrained<'a>(model: &'a dyn OcpModel, horizon: usize) -> OcpSpec<'a> {
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

    #[test]
    fn two_step_scalar_closed_form() {
        // stationarity: u0 = -(1 + u0) ... gives u = (-0.6, -0.2), J = 1.6
        let model = two_step();
        let spec = unconstrained(&model, 2);
        let sol = solve_ocp(&spec, &DVector::from_element(1, 1.0), None).unwrap();
        assert!(sol.converged);
        assert!((sol.inputs[0][0] + 0.6).abs() < 1e-8);
        assert!((sol.inputs[1][0] + 0.2).abs() < 1e-8);
        assert!((sol.objective - 1.6).abs() < 1e-8);
        assert_eq!(sol.states[0][0], 1.0);
    }

    #[test]
    fn kkt_of_analytic_optimum_and_of_zero_point() {
        let model = two_step();
        let spec = unconstrained(&model, 2);
        let x_bar = DVector::from_element(1, 1.0);
        let v = |x: f64| DVector::from_element(1, x);
        let optimum = NlpSolution {
            states: vec![v(1.0), v(0.4), v(0.2)],
            inputs: vec![v(-0.6), v(-0.2)],
            objective: 1.6,
            kkt_residual: 0.0,
            iterations: 0,
            converged: true,
            soft_duals: vec![],
        };
        assert!(kkt_residual(&spec, &x_bar, &optimum).unwrap() <= 1e-10);
        let zero = NlpSolution {
            states: vec![v(0.0); 3],
            inputs: vec![v(0.0); 2],
            ..optimum
        };
        assert!(kkt_residual(&spec, &x_bar, &zero).unwrap() > 0.0);
    }

    #[test]
    fn bounded_scalar_problem_respects_bounds_exactly() {
        let model = two_step();
        let mut spec = unconstrained(&model, 2);
        spec.u_lower = DVector::from_element(1, -0.3);
        spec.u_upper = DVector::from_element(1, 0.3);
        let sol = solve_ocp(&spec, &DVector::from_element(1, 1.0), None).unwrap();
        assert!(sol.converged);
        assert_eq!(sol.inputs[0][0], -0.3);
        assert!(sol.inputs[1][0] >= -0.3);
        assert!(sol.kkt_residual <= 1e-6);
    }

    #[test]
    fn finite_differences_match_linear_jacobian() {
        let model = LinearQuadratic {
            a: DMatrix::from_row_slice(2, 2, &[1.0, 0.1, -0.3, 0.9]),
            b: DMatrix::from_row_slice(2, 1, &[0.0, 0.5]),
            q: DMatrix::identity(2, 2),
            r: scalar(1.0),
            p_terminal: DMatrix::identity(2, 2),
        };
        let x = DVector::from_vec(vec![0.3, -2.0]);
        let u = DVector::from_element(1, 4.0);
        let (ax, bx) = finite_difference_jacobian(&model, &x, &u, &DVector::zeros(0));
        assert!((ax - &model.a).amax() < 1e-8);
        assert!((bx - &model.b).amax() < 1e-8);
    }

    #[test]
    fn input_change_weight_smooths_inputs() {
        let model = two_step();
        let mut spec = unconstrained(&model, 2);
        spec.input_change_weight = scalar(10.0);
        let x_bar = DVector::from_element(1, 1.0);
        let smooth = solve_ocp(&spec, &x_bar, None).unwrap();
        let plain = solve_ocp(&unconstrained(&model, 2), &x_bar, None).unwrap();
        assert!(smooth.converged);
        // first move is damped toward u_prev = 0
        assert!(smooth.inputs[0][0].abs() < plain.inputs[0][0].abs());
        assert!(smooth.kkt_residual <= 1e-6);
    }

    #[test]
    fn shift_by_zero_is_identity_and_by_horizon_holds_input() {
        let model = two_step();
        let spec = unconstrained(&model, 2);
        let sol = solve_ocp(&spec, &DVector::from_element(1, 1.0), None).unwrap();
        assert_eq!(shift_warm_start(&spec, &sol, 0).unwrap(), sol);
        let full = shift_warm_start(&spec, &sol, 2).unwrap();
        let last_u = sol.inputs[1][0];
        let x_n = sol.states[2][0];
        assert_eq!(full.states[0][0], x_n);
        assert_eq!(full.inputs[0][0], last_u);
        assert_eq!(full.inputs[1][0], last_u);
        assert!((full.states[1][0] - (x_n + last_u)).abs() < 1e-15);
        assert!((full.states[2][0] - (x_n + 2.0 * last_u)).abs() < 1e-15);
        assert!(shift_warm_start(&spec, &sol, 3).is_err());
    }

    #[test]
    fn rejects_malformed_spec() {
        let model = two_step();
        let mut spec = unconstrained(&model, 2);
        spec.forecast.pop();
        assert!(solve_ocp(&spec, &DVector::from_element(1, 1.0), None).is_err());
        let mut spec = unconstrained(&model, 2);
        spec.horizon = 0;
        spec.forecast.clear();
        assert!(solve_ocp(&spec, &DVector::from_element(1, 1.0), None).is_err());
    }

    #[test]
    fn non_finite_measurement_is_a_solver_failure() {
        let model = two_step();
        let spec = unconstrained(&model, 2);
        let err = solve_ocp(&spec, &DVector::from_element(1, f64::NAN), None).unwrap_err();
        assert!(matches!(err, Error::Solver(_)));
    }
}
