//! Dense strictly convex quadratic programs
//!
//! ```text
//!     minimize    1/2 x' H x + c' x
//!     subject to  E x  = f
//!                 A x >= b
//! ```
//!
//! solved with the Goldfarb-Idnani dual active-set method. The unconstrained
//! minimiser is the starting point, so no feasible initial guess is needed.
//! The factorisation `J = L^-T Q` of the active set is kept up to date with
//! Givens rotations.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("hessian is not positive definite")]
    NotPositiveDefinite,
    #[error("constraints are infeasible")]
    Infeasible,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("iteration limit reached")]
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    /// Lagrange multipliers of the inequality rows (zero when inactive).
    pub multipliers: DVector<f64>,
    /// Multipliers of the equality rows.
    pub equality_multipliers: DVector<f64>,
    /// Indices of active inequality rows.
    pub active: Vec<usize>,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct QpOptions {
    /// Violation (on unit-normalised rows) tolerated at termination.
    pub feasibility_tol: f64,
    pub max_iterations: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            feasibility_tol: 1e-11,
            max_iterations: 0,
        }
    }
}

pub fn solve_qp(
    hessian: &DMatrix<f64>,
    linear: &DVector<f64>,
    ineq: &DMatrix<f64>,
    ineq_rhs: &DVector<f64>,
) -> Result<QpSolution, QpError> {
    let n = hessian.nrows();
    solve_qp_with(
        hessian,
        linear,
        &DMatrix::zeros(0, n),
        &DVector::zeros(0),
        ineq,
        ineq_rhs,
        QpOptions::default(),
    )
}

fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    if b == 0.0 {
        return (1.0, 0.0, a);
    }
    let r = a.hypot(b);
    (a / r, b / r, r)
}

struct Factor {
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    q: usize,
}

impl Factor {
    /// Adds the constraint whose transformed normal is `d = J' n`.
    fn add(&mut self, mut d: DVector<f64>) {
        let n = self.j.nrows();
        for k in (self.q + 1..n).rev() {
            let (c, s, r) = givens(d[k - 1], d[k]);
            if s == 0.0 {
                continue;
            }
            d[k - 1] = r;
            d[k] = 0.0;
            for i in 0..n {
                let (a, b) = (self.j[(i, k - 1)], self.j[(i, k)]);
                self.j[(i, k - 1)] = c * a + s * b;
                self.j[(i, k)] = -s * a + c * b;
            }
        }
        for i in 0..=self.q {
            self.r[(i, self.q)] = d[i];
        }
        self.q += 1;
    }

    /// Removes active column `l` and restores the triangular factor.
    fn drop(&mut self, l: usize) {
        let n = self.j.nrows();
        let q = self.q;
        for col in l..q - 1 {
            for i in 0..n {
                self.r[(i, col)] = self.r[(i, col + 1)];
            }
        }
        for i in 0..n {
            self.r[(i, q - 1)] = 0.0;
        }
        for k in l..q - 1 {
            let (c, s, rr) = givens(self.r[(k, k)], self.r[(k + 1, k)]);
            if s == 0.0 {
                continue;
            }
            self.r[(k, k)] = rr;
            self.r[(k + 1, k)] = 0.0;
            for col in k + 1..q - 1 {
                let (a, b) = (self.r[(k, col)], self.r[(k + 1, col)]);
                self.r[(k, col)] = c * a + s * b;
                self.r[(k + 1, col)] = -s * a + c * b;
            }
            for i in 0..n {
                let (a, b) = (self.j[(i, k)], self.j[(i, k + 1)]);
                self.j[(i, k)] = c * a + s * b;
                self.j[(i, k + 1)] = -s * a + c * b;
            }
        }
        self.q -= 1;
    }

    /// Primal step direction and multiplier change for normal `n`.
    fn directions(&self, normal: &DVector<f64>) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let n = self.j.nrows();
        let d = self.j.tr_mul(normal);
        let mut z = DVector::zeros(n);
        for k in self.q..n {
            z.axpy(d[k], &self.j.column(k), 1.0);
        }
        let mut r = DVector::zeros(self.q);
        for i in (0..self.q).rev() {
            let mut acc = d[i];
            for k in i + 1..self.q {
                acc -= self.r[(i, k)] * r[k];
            }
            r[i] = acc / self.r[(i, i)];
        }
        (d, z, r)
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Row {
    Eq(usize),
    Ineq(usize),
}

pub fn solve_qp_with(
    hessian: &DMatrix<f64>,
    linear: &DVector<f64>,
    eq: &DMatrix<f64>,
    eq_rhs: &DVector<f64>,
    ineq: &DMatrix<f64>,
    ineq_rhs: &DVector<f64>,
    options: QpOptions,
) -> Result<QpSolution, QpError> {
    let n = hessian.nrows();
    if hessian.ncols() != n
        || linear.len() != n
        || eq.ncols() != n
        || ineq.ncols() != n
        || eq.nrows() != eq_rhs.len()
        || ineq.nrows() != ineq_rhs.len()
    {
        return Err(QpError::Dimension(format!(
            "H {}x{}, c {}, E {}x{}, f {}, A {}x{}, b {}",
            hessian.nrows(),
            hessian.ncols(),
            linear.len(),
            eq.nrows(),
            eq.ncols(),
            eq_rhs.len(),
            ineq.nrows(),
            ineq.ncols(),
            ineq_rhs.len()
        )));
    }
    let me = eq.nrows();
    let mi = ineq.nrows();

    // Unit-normalised rows; zero rows are checked directly.
    let normalise = |a: &DMatrix<f64>, b: &DVector<f64>| {
        let mut rows = Vec::with_capacity(a.nrows());
        for i in 0..a.nrows() {
            let norm = a.row(i).norm();
            rows.push((norm, a.row(i).transpose() / norm.max(f64::MIN_POSITIVE), b[i] / norm.max(f64::MIN_POSITIVE)));
        }
        rows
    };
    let eq_rows = normalise(eq, eq_rhs);
    let in_rows = normalise(ineq, ineq_rhs);
    for (i, (norm, _, _)) in eq_rows.iter().enumerate() {
        if *norm == 0.0 && eq_rhs[i].abs() > options.feasibility_tol {
            return Err(QpError::Infeasible);
        }
    }
    for (i, (norm, _, _)) in in_rows.iter().enumerate() {
        if *norm == 0.0 && ineq_rhs[i] > options.feasibility_tol {
            return Err(QpError::Infeasible);
        }
    }

    let chol = hessian
        .clone()
        .cholesky()
        .ok_or(QpError::NotPositiveDefinite)?;
    let l_inv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or(QpError::NotPositiveDefinite)?;
    let mut fac = Factor {
        j: l_inv.transpose(),
        r: DMatrix::zeros(n, n),
        q: 0,
    };
    let mut x = -chol.solve(linear);
    let mut active: Vec<(Row, f64)> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let max_iter = if options.max_iterations == 0 {
        50 * (n + me + mi) + 100
    } else {
        options.max_iterations
    };
    let tol = options.feasibility_tol;
    let mut iterations = 0;

    // Equalities first; they are never dropped.
    let mut pending_eq: Vec<usize> = (0..me).filter(|&i| eq_rows[i].0 > 0.0).collect();

    loop {
        iterations += 1;
        if iterations > max_iter {
            return Err(QpError::MaxIterations);
        }
        // Step 1: pick the next constraint to add.
        let next = if let Some(i) = pending_eq.pop() {
            Some(Row::Eq(i))
        } else {
            let mut worst: Option<(usize, f64)> = None;
            for (i, (norm, a, b)) in in_rows.iter().enumerate() {
                if *norm == 0.0 || active.iter().any(|(r, _)| *r == Row::Ineq(i)) {
                    continue;
                }
                let s = a.dot(&x) - b;
                if s < -tol && worst.map_or(true, |(_, w)| s < w) {
                    worst = Some((i, s));
                }
            }
            worst.map(|(i, _)| Row::Ineq(i))
        };
        let Some(p) = next else { break };
        let (normal, rhs) = match p {
            Row::Eq(i) => (&eq_rows[i].1, eq_rows[i].2),
            Row::Ineq(i) => (&in_rows[i].1, in_rows[i].2),
        };
        // An equality is treated as the inequality that is currently violated.
        let sign = match p {
            Row::Eq(_) if normal.dot(&x) - rhs > 0.0 => -1.0,
            _ => 1.0,
        };
        let normal = normal * sign;
        let rhs = rhs * sign;
        let mut u_new = 0.0;

        // Step 2: move until p is satisfied and added.
        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(QpError::MaxIterations);
            }
            let s_p = normal.dot(&x) - rhs;
            let (d, z, r) = fac.directions(&normal);
            let mut t1 = f64::INFINITY;
            let mut drop_at = None;
            for (k, row) in active.iter().enumerate() {
                if matches!(row.0, Row::Ineq(_)) && r[k] > 0.0 {
                    let v = u[k] / r[k];
                    if v < t1 {
                        t1 = v;
                        drop_at = Some(k);
                    }
                }
            }
            let zn = z.dot(&normal);
            let t2 = if z.norm() > 1e-12 && zn > 1e-14 {
                -s_p / zn
            } else {
                f64::INFINITY
            };
            if t2.is_infinite() && matches!(p, Row::Eq(_)) && s_p.abs() <= tol {
                // linearly dependent but consistent equality
                break;
            }
            if t1.is_infinite() && t2.is_infinite() {
                return Err(QpError::Infeasible);
            }
            if t2.is_infinite() {
                for k in 0..active.len() {
                    u[k] -= t1 * r[k];
                }
                u_new += t1;
                let l = drop_at.unwrap();
                active.remove(l);
                u.remove(l);
                fac.drop(l);
                continue;
            }
            let t = t1.min(t2);
            x.axpy(t, &z, 1.0);
            for k in 0..active.len() {
                u[k] -= t * r[k];
            }
            u_new += t;
            if t2 <= t1 {
                active.push((p, sign));
                u.push(u_new);
                fac.add(d);
                break;
            }
            let l = drop_at.unwrap();
            active.remove(l);
            u.remove(l);
            fac.drop(l);
        }
    }

    let mut multipliers = DVector::zeros(mi);
    let mut equality_multipliers = DVector::zeros(me);
    let mut active_ineq = Vec::new();
    for ((row, sign), mult) in active.iter().zip(&u) {
        match *row {
            Row::Ineq(i) => {
                multipliers[i] = mult / in_rows[i].0;
                active_ineq.push(i);
            }
            Row::Eq(i) => equality_multipliers[i] = sign * mult / eq_rows[i].0,
        }
    }
    active_ineq.sort_unstable();
    let objective = 0.5 * x.dot(&(hessian * &x)) + linear.dot(&x);
    Ok(QpSolution {
        x,
        objective,
        multipliers,
        equality_multipliers,
        active: active_ineq,
        iterations,
    })
}
