//! Dense strictly convex QP solver (Goldfarb-Idnani dual active set).
//!
//! Solves `min 1/2 x'Gx + c'x  s.t.  a_i'x >= b_i` for positive definite `G`.
//! The factorization `J = L^-T`, rotated as constraints enter and leave, keeps
//! every iteration at O(n^2) after the initial Cholesky.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// One multiplier per constraint row, zero for inactive rows.
    /// Stationarity reads `G x + c = sum_i mult_i a_i`.
    pub multipliers: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
}

/// Constraint rows are the rows of `a`.
#[derive(Debug, Clone)]
pub struct Qp<'a> {
    pub hessian: &'a DMatrix<f64>,
    pub linear: &'a DVector<f64>,
    pub a: &'a DMatrix<f64>,
    pub b: &'a DVector<f64>,
    /// Rows to treat as active from the start; each must be a dual-feasible choice
    /// (nonnegative multiplier at the face minimizer), e.g. slack lower bounds under
    /// a positive linear penalty.
    pub initial_active: &'a [usize],
}

struct Factor {
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    q: usize,
}

impl Factor {
    fn add(&mut self, mut d: DVector<f64>) -> bool {
        let n = self.j.nrows();
        let q = self.q;
        for idx in (q + 1..n).rev() {
            let (x, y) = (d[idx - 1], d[idx]);
            if y == 0.0 {
                continue;
            }
            let h = x.hypot(y);
            let (c, s) = (x / h, y / h);
            d[idx - 1] = h;
            d[idx] = 0.0;
            for row in 0..n {
                let (a, b) = (self.j[(row, idx - 1)], self.j[(row, idx)]);
                self.j[(row, idx - 1)] = c * a + s * b;
                self.j[(row, idx)] = -s * a + c * b;
            }
        }
        if d[q].abs() <= 1e-14 * d.amax().max(1e-300) {
            return false;
        }
        for row in 0..=q {
            self.r[(row, q)] = d[row];
        }
        self.q += 1;
        true
    }

    fn drop(&mut self, l: usize) {
        let n = self.j.nrows();
        let q = self.q;
        for col in l..q - 1 {
            for row in 0..n {
                self.r[(row, col)] = self.r[(row, col + 1)];
            }
        }
        for row in 0..n {
            self.r[(row, q - 1)] = 0.0;
        }
        for col in l..q - 1 {
            let (x, y) = (self.r[(col, col)], self.r[(col + 1, col)]);
            if y == 0.0 {
                continue;
            }
            let h = x.hypot(y);
            let (c, s) = (x / h, y / h);
            for k in col..q - 1 {
                let (a, b) = (self.r[(col, k)], self.r[(col + 1, k)]);
                self.r[(col, k)] = c * a + s * b;
                self.r[(col + 1, k)] = -s * a + c * b;
            }
            for row in 0..n {
                let (a, b) = (self.j[(row, col)], self.j[(row, col + 1)]);
                self.j[(row, col)] = c * a + s * b;
                self.j[(row, col + 1)] = -s * a + c * b;
            }
        }
        self.q -= 1;
    }

    /// Solves `R[..q, ..q] y = rhs`.
    fn back_solve(&self, rhs: &[f64]) -> Vec<f64> {
        let q = self.q;
        let mut y = vec![0.0; q];
        for i in (0..q).rev() {
            let mut acc = rhs[i];
            for k in i + 1..q {
                acc -= self.r[(i, k)] * y[k];
            }
            y[i] = acc / self.r[(i, i)];
        }
        y
    }

    /// Solves `R[..q, ..q]' y = rhs`.
    fn forward_solve_transposed(&self, rhs: &[f64]) -> Vec<f64> {
        let q = self.q;
        let mut y = vec![0.0; q];
        for i in 0..q {
            let mut acc = rhs[i];
            for k in 0..i {
                acc -= self.r[(k, i)] * y[k];
            }
            y[i] = acc / self.r[(i, i)];
        }
        y
    }
}

pub fn solve(qp: &Qp<'_>) -> Result<QpSolution> {
    let n = qp.hessian.nrows();
    let m = qp.a.nrows();
    if qp.a.ncols() != n && m > 0 {
        return Err(Error::Dimension {
            context: "qp constraint columns",
            expected: n,
            got: qp.a.ncols(),
        });
    }

    let chol = qp
        .hessian
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Solver("qp hessian is not positive definite".into()))?;
    let l_inv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| Error::Solver("singular cholesky factor".into()))?;
    let mut fac = Factor {
        j: l_inv.transpose(),
        r: DMatrix::zeros(n, n),
        q: 0,
    };

    let mut active: Vec<usize> = Vec::new();
    let mut is_active = vec![false; m];
    for &i in qp.initial_active {
        if is_active[i] {
            continue;
        }
        let d = fac.j.transpose() * qp.a.row(i).transpose();
        if fac.add(d) {
            active.push(i);
            is_active[i] = true;
        }
    }

    // minimizer on the initial face
    let mut x = face_minimizer(&fac, qp, &active);
    let mut u: Vec<f64> = if active.is_empty() {
        Vec::new()
    } else {
        let grad = qp.hessian * &x + qp.linear;
        let proj: Vec<f64> = (0..fac.q).map(|k| fac.j.column(k).dot(&grad)).collect();
        fac.back_solve(&proj)
            .into_iter()
            .map(|v| v.max(0.0))
            .collect()
    };

    let max_iter = 10 * (n + m) + 50;
    let mut iterations = 0;
    loop {
        iterations += 1;
        if iterations > max_iter {
            return Err(Error::Solver(format!(
                "qp did not terminate in {max_iter} iterations"
            )));
        }

        let x_scale = x.amax();
        let mut worst: Option<(usize, f64)> = None;
        for i in 0..m {
            if is_active[i] {
                continue;
            }
            let row = qp.a.row(i);
            let slack = row.dot(&x.transpose()) - qp.b[i];
            let tol = 1e-12 * (1.0 + qp.b[i].abs() + row.amax() * x_scale);
            if slack < -tol && worst.is_none_or(|(_, s)| slack < s) {
                worst = Some((i, slack));
            }
        }
        let Some((p, _)) = worst else { break };
        let np = qp.a.row(p).transpose();
        let mut t_acc = 0.0;

        loop {
            let d = fac.j.transpose() * &np;
            let q = fac.q;
            let mut z = DVector::zeros(n);
            for k in q..n {
                z.axpy(d[k], &fac.j.column(k), 1.0);
            }
            let r = fac.back_solve(&d.as_slice()[..q]);

            let mut t_dual = f64::INFINITY;
            let mut drop_at = None;
            for (k, &rk) in r.iter().enumerate() {
                if rk > 1e-14 {
                    let t = u[k] / rk;
                    if t < t_dual {
                        t_dual = t;
                        drop_at = Some(k);
                    }
                }
            }
            let zn = z.dot(&np);
            let slack_p = np.dot(&x) - qp.b[p];
            // z'n is the squared norm of the free part of d, so compare it to all of d
            let t_primal = if zn <= 1e-13 * d.norm_squared() || z.amax() == 0.0 {
                f64::INFINITY
            } else {
                (-slack_p / zn).max(0.0)
            };

            if t_primal.is_infinite() {
                let Some(l) = drop_at else {
                    return Err(Error::Solver(format!("qp is infeasible at constraint {p}")));
                };
                for (uk, rk) in u.iter_mut().zip(&r) {
                    *uk -= t_dual * rk;
                }
                t_acc += t_dual;
                fac.drop(l);
                is_active[active.remove(l)] = false;
                u.remove(l);
                continue;
            }

            let t = t_primal.min(t_dual);
            x.axpy(t, &z, 1.0);
            for (uk, rk) in u.iter_mut().zip(&r) {
                *uk -= t * rk;
            }
            t_acc += t;

            if t_primal <= t_dual {
                if fac.add(d) {
                    active.push(p);
                    is_active[p] = true;
                    u.push(t_acc);
                } else {
                    return Err(Error::Solver(
                        "degenerate constraint could not enter".into(),
                    ));
                }
                break;
            }
            let l = drop_at.expect("finite dual step has a blocking constraint");
            fac.drop(l);
            is_active[active.remove(l)] = false;
            u.remove(l);
        }
    }

    let mut multipliers = DVector::zeros(m);
    for (k, &i) in active.iter().enumerate() {
        multipliers[i] = u[k].max(0.0);
    }
    let objective = 0.5 * x.dot(&(qp.hessian * &x)) + qp.linear.dot(&x);
    Ok(QpSolution {
        x,
        multipliers,
        objective,
        iterations,
    })
}

fn face_minimizer(fac: &Factor, qp: &Qp<'_>, active: &[usize]) -> DVector<f64> {
    let n = fac.j.nrows();
    let q = fac.q;
    let mut x = DVector::zeros(n);
    for k in q..n {
        let col = fac.j.column(k);
        x.axpy(-col.dot(qp.linear), &col, 1.0);
    }
    if q > 0 {
        let b_active: Vec<f64> = active.iter().map(|&i| qp.b[i]).collect();
        let y = fac.forward_solve_transposed(&b_active);
        for (k, yk) in y.iter().enumerate() {
            x.axpy(*yk, &fac.j.column(k), 1.0);
        }
    }
    x
}
