//! Nominal receding-horizon controller.
//!
//! The prediction model is the integrator `x[i+1] = x[i] + dt u[i+1]` and the
//! problem is transcribed by single shooting over the inputs. Each segment's
//! four inputs are parameterised by two tendon-difference coordinates and one
//! common rate, so every predicted state keeps `3 g_j = sum_m q_jm`. The
//! nonlinear program is solved by SQP with a Gauss-Newton Hessian and an l1
//! merit line search.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector3};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kinematics::{
    bending_coefficients, forward_kinematics, length_index, segment_curvature, shape_jacobians,
    tendon_index, ActuatorState, ActuatorVector, RobotGeometry, RobotShape, ACTUATORS, SEGMENTS,
    TENDONS_PER_SEGMENT,
};
use crate::qp::{solve_qp, QpError};
use crate::sdf::{SafeZone, SdfResult};

pub type ActuatorMatrix = SMatrix<f64, ACTUATORS, ACTUATORS>;

/// Reduced coordinates per segment.
const REDUCED_PER_SEGMENT: usize = 3;
const ARMIJO: f64 = 1e-4;
const MIN_STEP: f64 = 1e-8;
const ELASTIC_WEIGHT: f64 = 1e8;
/// Disks within this distance of the margin also get a row for every other
/// mesh feature that is at most this much farther than the nearest one.
const WITNESS_BAND: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MpcParams {
    pub horizon: usize,
    /// Sample time (s).
    pub dt: f64,
    pub q: Matrix3<f64>,
    pub r: ActuatorMatrix,
    pub s: ActuatorMatrix,
    /// Safe distance c_d kept between every disk and the zone boundary (mm).
    pub safety_margin: f64,
    /// Input box (mm/s).
    pub input_min: ActuatorVector,
    pub input_max: ActuatorVector,
    /// Constraint feasibility tolerance tol_c (mm).
    pub constraint_tol: f64,
    /// Relative cost-change tolerance tol_g.
    pub cost_tol: f64,
    pub max_iterations: usize,
}

/// Default actuator rate limit (mm/s).
pub const DEFAULT_INPUT_LIMIT: f64 = 2.0;

impl Default for MpcParams {
    fn default() -> Self {
        Self {
            horizon: 2,
            dt: 1.0 / 30.0,
            q: Matrix3::identity() * 1000.0,
            r: ActuatorMatrix::identity() * 10.0,
            s: ActuatorMatrix::identity() * 10.0,
            safety_margin: 5.5,
            input_min: ActuatorVector::repeat(-DEFAULT_INPUT_LIMIT),
            input_max: ActuatorVector::repeat(DEFAULT_INPUT_LIMIT),
            constraint_tol: 1e-6,
            cost_tol: 1e-8,
            max_iterations: 50,
        }
    }
}

fn is_psd<const D: usize>(m: &SMatrix<f64, D, D>) -> bool {
    let m = DMatrix::from_column_slice(D, D, m.as_slice());
    let scale = m.amax().max(1.0);
    if (&m - m.transpose()).amax() > 1e-9 * scale || m.iter().any(|v| !v.is_finite()) {
        return false;
    }
    m.symmetric_eigenvalues().iter().all(|&l| l >= -1e-9 * scale)
}

impl MpcParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.horizon < 1 {
            return bad("horizon must be at least 1");
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return bad("sample time must be positive");
        }
        if !is_psd(&self.q) || !is_psd(&self.r) || !is_psd(&self.s) {
            return bad("weights Q, R and S must be symmetric positive semidefinite");
        }
        if !(self.safety_margin > 0.0) {
            return bad("safety margin must be positive");
        }
        for i in 0..ACTUATORS {
            let (lo, hi) = (self.input_min[i], self.input_max[i]);
            if !(lo <= 0.0 && hi >= 0.0) || !lo.is_finite() || !hi.is_finite() {
                return bad("input box must be finite and contain zero");
            }
        }
        if !(self.constraint_tol > 0.0) || !(self.cost_tol > 0.0) || self.max_iterations == 0 {
            return bad("solver tolerances and iteration limit must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverStatus {
    Optimal,
    MaxIter,
    /// The line search could not make progress away from a stationary point.
    Stalled,
    Infeasible,
}

impl SolverStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Optimal => "optimal",
            Self::MaxIter => "max_iter",
            Self::Stalled => "stalled",
            Self::Infeasible => "infeasible",
        }
    }
}

#[derive(Debug, Clone)]
pub struct MpcSolution {
    /// Predicted states x[0..N], `states[0]` is the initial state.
    pub states: Vec<ActuatorState>,
    /// Inputs u[1..N].
    pub inputs: Vec<ActuatorVector>,
    /// Predicted shapes for `states`.
    pub outputs: Vec<RobotShape>,
    pub cost: f64,
    pub status: SolverStatus,
    pub iterations: usize,
    /// Linearised constraints active in the last QP.
    pub active_constraints: usize,
    /// Largest nonlinear constraint violation over the horizon (mm).
    pub max_violation: f64,
}

impl MpcSolution {
    pub fn first_input(&self) -> ActuatorVector {
        self.inputs[0]
    }
}

/// `e' Q e + u' R u + x' S x` with `e` the nominal end-effector error.
pub fn stage_cost(
    state: &ActuatorState,
    input: &ActuatorVector,
    target: &Vector3<f64>,
    params: &MpcParams,
    geom: &RobotGeometry,
) -> Result<f64> {
    let e = forward_kinematics(state, geom)?.end_effector() - target;
    Ok(e.dot(&(params.q * e)) + input.dot(&(params.r * input)) + state.0.dot(&(params.s * state.0)))
}

/// Residuals of every hard constraint at one predicted step. Inequalities are
/// satisfied when non-negative, equalities when zero.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstraintResiduals {
    /// `d(p_i) - c_d` for every disk (empty without a zone).
    pub clearance: Vec<f64>,
    /// `3 g_j - sum_m q_jm`.
    pub coupling: [f64; SEGMENTS],
    /// `theta_max / g_j - k_j`.
    pub curvature: [f64; SEGMENTS],
    /// `x - x_min` followed by `x_max - x`.
    pub state_box: Vec<f64>,
    /// `u - u_min` followed by `u_max - u`.
    pub input_box: Vec<f64>,
}

impl ConstraintResiduals {
    pub fn inequalities(&self) -> impl Iterator<Item = f64> + '_ {
        self.clearance
            .iter()
            .chain(&self.curvature)
            .chain(&self.state_box)
            .chain(&self.input_box)
            .copied()
    }

    pub fn stacked(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.clearance.clone();
        out.extend(self.coupling);
        out.extend(self.curvature);
        out.extend(&self.state_box);
        out.extend(&self.input_box);
        out
    }

    /// Largest violation of any constraint (0 when feasible).
    pub fn max_violation(&self) -> f64 {
        let ineq = self.inequalities().fold(0.0f64, |m, r| m.max(-r));
        self.coupling.iter().fold(ineq, |m, r| m.max(r.abs()))
    }

    pub fn is_feasible(&self, tol: f64) -> bool {
        self.max_violation() <= tol
    }
}

pub fn evaluate_constraints(
    state: &ActuatorState,
    input: &ActuatorVector,
    zone: Option<&SafeZone>,
    params: &MpcParams,
    geom: &RobotGeometry,
) -> Result<ConstraintResiduals> {
    let shape = forward_kinematics(state, geom)?;
    let clearance = match zone {
        Some(zone) => shape
            .points
            .iter()
            .map(|p| zone.signed_distance(p).distance - params.safety_margin)
            .collect(),
        None => Vec::new(),
    };
    let mut curvature = [0.0; SEGMENTS];
    for (j, c) in curvature.iter_mut().enumerate() {
        *c = geom.max_bend_angle / state.segment_length(j) - segment_curvature(state, geom, j)?;
    }
    let (lo, hi) = (geom.lower_bounds(), geom.upper_bounds());
    let state_box = (state.0 - lo).iter().chain((hi - state.0).iter()).copied().collect();
    let input_box = (input - params.input_min)
        .iter()
        .chain((params.input_max - input).iter())
        .copied()
        .collect();
    Ok(ConstraintResiduals {
        clearance,
        coupling: state.coupling_residuals(),
        curvature,
        state_box,
        input_box,
    })
}

/// Nominal state for the next solve: the centred straight state on the first
/// call, afterwards the previous prediction one step ahead.
pub fn initialize(previous: Option<&MpcSolution>, geom: &RobotGeometry) -> ActuatorState {
    match previous {
        Some(sol) => sol.states[1],
        None => geom.centered_state(),
    }
}

/// Why the initial state is infeasible, if it is.
fn initial_violation(
    x0: &ActuatorState,
    zone: Option<&SafeZone>,
    params: &MpcParams,
    geom: &RobotGeometry,
) -> Result<Option<String>> {
    let res = evaluate_constraints(x0, &ActuatorVector::zeros(), zone, params, geom)?;
    let tol = params.constraint_tol;
    if let Some((i, c)) = res
        .clearance
        .iter()
        .enumerate()
        .find(|(_, c)| **c < -tol)
    {
        return Ok(Some(format!("disk {} is {:.4} mm inside the margin", i + 1, -c)));
    }
    if let Some((j, c)) = res.coupling.iter().enumerate().find(|(_, c)| c.abs() > tol) {
        return Ok(Some(format!("segment {} coupling residual {c:.3e}", j + 1)));
    }
    if let Some(j) = (0..SEGMENTS).find(|&j| res.curvature[j] < -tol / state_scale(x0, j)) {
        return Ok(Some(format!("segment {} exceeds its maximum curvature", j + 1)));
    }
    if res.state_box.iter().any(|r| *r < -tol) {
        return Ok(Some("state is outside the actuator box".into()));
    }
    Ok(None)
}

fn state_scale(x: &ActuatorState, j: usize) -> f64 {
    x.segment_length(j).max(1.0)
}

/// Column basis of the tendon-consistent input subspace for one segment:
/// two zero-sum tendon directions and a common rate for all four actuators.
fn segment_basis() -> SMatrix<f64, 4, REDUCED_PER_SEGMENT> {
    let a = 1.0 / 2f64.sqrt();
    let b = 1.0 / 6f64.sqrt();
    SMatrix::<f64, 4, REDUCED_PER_SEGMENT>::from_row_slice(&[
        a, b, 1.0, //
        -a, b, 1.0, //
        0.0, -2.0 * b, 1.0, //
        0.0, 0.0, 1.0,
    ])
}

struct Trajectory {
    inputs: Vec<ActuatorVector>,
    /// x[0..N]
    states: Vec<ActuatorState>,
    shapes: Vec<RobotShape>,
    sdf: Vec<Vec<SdfResult>>,
    cost: f64,
    /// Nonlinear constraint values, feasible when non-negative.
    constraints: Vec<f64>,
}

impl Trajectory {
    fn violation(&self) -> f64 {
        self.constraints.iter().map(|c| (-c).max(0.0)).sum()
    }

    fn max_violation(&self) -> f64 {
        self.constraints.iter().fold(0.0f64, |m, c| m.max(-c))
    }
}

struct Shooting<'a> {
    x0: ActuatorState,
    target: Option<Vector3<f64>>,
    zone: Option<&'a SafeZone>,
    params: &'a MpcParams,
    geom: &'a RobotGeometry,
    /// 12 x m map from one step's reduced coordinates to its input.
    basis: DMatrix<f64>,
    coeffs: SMatrix<f64, 2, TENDONS_PER_SEGMENT>,
    /// Linear constraints `a v >= b` on the whole decision vector.
    lin_a: DMatrix<f64>,
    lin_b: DVector<f64>,
}

impl<'a> Shooting<'a> {
    fn new(
        x0: ActuatorState,
        target: Option<Vector3<f64>>,
        zone: Option<&'a SafeZone>,
        params: &'a MpcParams,
        geom: &'a RobotGeometry,
    ) -> Self {
        // Segments whose inputs are all pinned to zero are left out.
        let frozen = |j: usize| {
            (0..=TENDONS_PER_SEGMENT).all(|m| {
                let i = 4 * j + m;
                params.input_min[i] == 0.0 && params.input_max[i] == 0.0
            })
        };
        let live: Vec<usize> = (0..SEGMENTS).filter(|&j| !frozen(j)).collect();
        let per_seg = segment_basis();
        let mut basis = DMatrix::zeros(ACTUATORS, REDUCED_PER_SEGMENT * live.len());
        for (k, &j) in live.iter().enumerate() {
            for m in 0..TENDONS_PER_SEGMENT {
                for c in 0..REDUCED_PER_SEGMENT {
                    basis[(tendon_index(j, m), REDUCED_PER_SEGMENT * k + c)] = per_seg[(m, c)];
                }
            }
            for c in 0..REDUCED_PER_SEGMENT {
                basis[(length_index(j), REDUCED_PER_SEGMENT * k + c)] = per_seg[(3, c)];
            }
        }

        let mut s = Self {
            x0,
            target,
            zone,
            params,
            geom,
            basis,
            coeffs: bending_coefficients(geom),
            lin_a: DMatrix::zeros(0, 0),
            lin_b: DVector::zeros(0),
        };
        s.build_linear_constraints();
        s
    }

    fn step_dim(&self) -> usize {
        self.basis.ncols()
    }

    fn dim(&self) -> usize {
        self.step_dim() * self.params.horizon
    }

    fn build_linear_constraints(&mut self) {
        let n = self.params.horizon;
        let m = self.step_dim();
        let (lo, hi) = (self.geom.lower_bounds(), self.geom.upper_bounds());
        let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
        for i in 0..n {
            for a in 0..ACTUATORS {
                let brow = self.basis.row(a);
                if brow.amax() == 0.0 {
                    continue;
                }
                // input box
                let mut r = DVector::zeros(n * m);
                r.rows_mut(i * m, m).copy_from(&brow.transpose());
                rows.push((r.clone(), self.params.input_min[a]));
                rows.push((-r, -self.params.input_max[a]));
                // state box on x[i+1] = x0 + dt sum_{l<=i} u[l]
                let mut r = DVector::zeros(n * m);
                for l in 0..=i {
                    r.rows_mut(l * m, m).copy_from(&(brow.transpose() * self.params.dt));
                }
                rows.push((r.clone(), lo[a] - self.x0.0[a]));
                rows.push((-r, self.x0.0[a] - hi[a]));
            }
        }
        self.lin_a = DMatrix::from_fn(rows.len(), n * m, |i, j| rows[i].0[j]);
        self.lin_b = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
    }

    fn linear_violation(&self, v: &DVector<f64>) -> f64 {
        (&self.lin_a * v - &self.lin_b).iter().fold(0.0f64, |m, s| m.max(-s))
    }

    fn inputs(&self, v: &DVector<f64>) -> Vec<ActuatorVector> {
        let m = self.step_dim();
        (0..self.params.horizon)
            .map(|i| {
                let u = &self.basis * v.rows(i * m, m);
                ActuatorVector::from_column_slice(u.as_slice())
            })
            .collect()
    }

    /// Reduced coordinates that best reproduce `inputs`.
    fn reduce(&self, inputs: &[ActuatorVector]) -> DVector<f64> {
        let m = self.step_dim();
        let mut v = DVector::zeros(self.dim());
        let gram = self.basis.tr_mul(&self.basis);
        let Some(inv) = gram.try_inverse() else {
            return v;
        };
        for (i, u) in inputs.iter().take(self.params.horizon).enumerate() {
            let du = DVector::from_column_slice(u.as_slice());
            v.rows_mut(i * m, m).copy_from(&(&inv * self.basis.tr_mul(&du)));
        }
        v
    }

    fn evaluate(&self, v: &DVector<f64>) -> Result<Trajectory> {
        let p = self.params;
        let inputs = self.inputs(v);
        let mut states = Vec::with_capacity(p.horizon + 1);
        states.push(self.x0);
        for u in &inputs {
            let x = states.last().unwrap().0 + u * p.dt;
            states.push(ActuatorState(x));
        }
        let mut shapes = Vec::with_capacity(p.horizon + 1);
        let mut sdf = Vec::with_capacity(p.horizon + 1);
        let mut cost = 0.0;
        let mut constraints = Vec::new();
        for (i, x) in states.iter().enumerate() {
            let shape = forward_kinematics(x, self.geom)?;
            let dists: Vec<SdfResult> = match self.zone {
                Some(zone) => shape.points.iter().map(|q| zone.signed_distance(q)).collect(),
                None => Vec::new(),
            };
            if i > 0 {
                let u = &inputs[i - 1];
                if let Some(t) = self.target {
                    let e = shape.end_effector() - t;
                    cost += e.dot(&(p.q * e));
                }
                cost += u.dot(&(p.r * u)) + x.0.dot(&(p.s * x.0));
                constraints.extend(dists.iter().map(|d| d.distance - p.safety_margin));
                for j in 0..SEGMENTS {
                    let ab = self.bending(x, j);
                    constraints.push(self.max_bend_sq() - ab.norm_squared() / self.rt_sq());
                }
            }
            shapes.push(shape);
            sdf.push(dists);
        }
        Ok(Trajectory {
            inputs,
            states,
            shapes,
            sdf,
            cost,
            constraints,
        })
    }

    fn rt_sq(&self) -> f64 {
        self.geom.tendon_radius * self.geom.tendon_radius
    }

    fn max_bend_sq(&self) -> f64 {
        self.geom.max_bend_angle * self.geom.max_bend_angle
    }

    /// Bending vector `(A, B)` of segment `j`; its norm over r_t is the bend angle.
    fn bending(&self, x: &ActuatorState, j: usize) -> nalgebra::Vector2<f64> {
        let g = x.segment_length(j);
        let off = Vector3::from_fn(|m, _| x.tendon(j, m) - g);
        self.coeffs * off
    }

    /// Gradient, Gauss-Newton Hessian, constraint Jacobian and constraint
    /// values at `traj`. The first rows match `traj.constraints`; the rest
    /// linearise the distance to runner-up mesh features so that a step
    /// cannot trade one face for its neighbour.
    fn linearize(&self, traj: &Trajectory) -> Result<Linearization> {
        let p = self.params;
        let m = self.step_dim();
        let nv = self.dim();
        let mut grad = DVector::zeros(nv);
        let mut hess = DMatrix::zeros(nv, nv);
        let mut jac = DMatrix::zeros(traj.constraints.len(), nv);
        let mut extra: Vec<(DMatrix<f64>, f64)> = Vec::new();
        let b_dt = &self.basis * p.dt;
        let mut row = 0;
        for i in 1..=p.horizon {
            let x = &traj.states[i];
            let u = &traj.inputs[i - 1];
            // d x[i] / d v: dt B in every block l < i
            let mut dx = DMatrix::zeros(ACTUATORS, nv);
            for l in 0..i {
                dx.view_mut((0, l * m), (ACTUATORS, m)).copy_from(&b_dt);
            }
            let mut du = DMatrix::zeros(ACTUATORS, nv);
            du.view_mut((0, (i - 1) * m), (ACTUATORS, m)).copy_from(&self.basis);

            let needs_jac = self.target.is_some() || self.zone.is_some();
            let jacs = if needs_jac {
                shape_jacobians(x, self.geom)?
            } else {
                Vec::new()
            };

            let s_dyn = DMatrix::from_column_slice(ACTUATORS, ACTUATORS, p.s.as_slice());
            let r_dyn = DMatrix::from_column_slice(ACTUATORS, ACTUATORS, p.r.as_slice());
            let xs = DVector::from_column_slice(x.0.as_slice());
            let us = DVector::from_column_slice(u.as_slice());
            let mut gx = &s_dyn * &xs * 2.0;
            let mut hx = &s_dyn * 2.0;
            if let Some(t) = self.target {
                let jee = jacs.last().unwrap();
                let e = traj.shapes[i].end_effector() - t;
                let jq = jee.transpose() * p.q;
                gx += DVector::from_column_slice((jq * e * 2.0).as_slice());
                let h = jq * jee * 2.0;
                hx += DMatrix::from_column_slice(ACTUATORS, ACTUATORS, h.as_slice());
            }
            grad += dx.tr_mul(&gx) + du.tr_mul(&(&r_dyn * &us * 2.0));
            hess += dx.tr_mul(&(&hx * &dx)) + du.tr_mul(&(&r_dyn * 2.0 * &du));

            if let Some(zone) = self.zone {
                for (k, d) in traj.sdf[i].iter().enumerate() {
                    let gj = d.gradient.transpose() * jacs[k];
                    let gj = DMatrix::from_row_slice(1, ACTUATORS, gj.as_slice());
                    jac.row_mut(row).copy_from(&(gj * &dx));
                    row += 1;
                    if d.distance <= 0.0 || d.distance - p.safety_margin > WITNESS_BAND {
                        continue;
                    }
                    let point = traj.shapes[i].points[k];
                    for w in zone.witnesses_within(&point, d.distance + WITNESS_BAND) {
                        if w.feature == d.feature {
                            continue;
                        }
                        let gw = w.gradient.transpose() * jacs[k];
                        let gw = DMatrix::from_row_slice(1, ACTUATORS, gw.as_slice());
                        extra.push((gw * &dx, w.distance - p.safety_margin));
                    }
                }
            }
            for j in 0..SEGMENTS {
                let ab = self.bending(x, j);
                let mut gx = DMatrix::zeros(1, ACTUATORS);
                let scale = -2.0 / self.rt_sq();
                for mm in 0..TENDONS_PER_SEGMENT {
                    let d = scale * (ab[0] * self.coeffs[(0, mm)] + ab[1] * self.coeffs[(1, mm)]);
                    gx[(0, tendon_index(j, mm))] = d;
                    gx[(0, length_index(j))] -= d;
                }
                jac.row_mut(row).copy_from(&(gx * &dx));
                row += 1;
            }
        }
        // keeps the QP strictly convex when R vanishes
        let reg = 1e-9 * (1.0 + hess.diagonal().amax());
        for k in 0..nv {
            hess[(k, k)] += reg;
        }
        let n_main = jac.nrows();
        let mut values = DVector::zeros(n_main + extra.len());
        values.rows_mut(0, n_main).copy_from(&DVector::from_column_slice(&traj.constraints));
        let jac = if extra.is_empty() {
            jac
        } else {
            let mut all = jac.resize_vertically(n_main + extra.len(), 0.0);
            for (k, (r, v)) in extra.into_iter().enumerate() {
                all.row_mut(n_main + k).copy_from(&r);
                values[n_main + k] = v;
            }
            all
        };
        Ok(Linearization {
            grad,
            hess,
            jac,
            values,
        })
    }
}

struct Linearization {
    grad: DVector<f64>,
    hess: DMatrix<f64>,
    jac: DMatrix<f64>,
    /// Constraint values for the rows of `jac`, feasible when non-negative.
    values: DVector<f64>,
}

struct Step {
    d: DVector<f64>,
    multipliers: DVector<f64>,
    active: usize,
}

/// Solves the linearised subproblem; falls back to an elastic version when
/// the linearised constraints admit no solution.
fn qp_step(shoot: &Shooting, v: &DVector<f64>, lin: &Linearization) -> Result<Step> {
    let (grad, hess, jac) = (&lin.grad, &lin.hess, &lin.jac);
    let nv = v.len();
    let n_lin = shoot.lin_a.nrows();
    let n_nl = jac.nrows();
    let mut a = DMatrix::zeros(n_lin + n_nl, nv);
    a.view_mut((0, 0), (n_lin, nv)).copy_from(&shoot.lin_a);
    a.view_mut((n_lin, 0), (n_nl, nv)).copy_from(jac);
    let mut b = DVector::zeros(n_lin + n_nl);
    b.rows_mut(0, n_lin).copy_from(&(&shoot.lin_b - &shoot.lin_a * v));
    for k in 0..n_nl {
        b[n_lin + k] = -lin.values[k];
    }
    match solve_qp(hess, grad, &a, &b) {
        Ok(sol) => Ok(Step {
            active: sol.active.len(),
            multipliers: sol.multipliers.rows(n_lin, n_nl).into_owned(),
            d: sol.x,
        }),
        Err(QpError::Infeasible) | Err(QpError::MaxIterations) => {
            let mut he = DMatrix::zeros(nv + 1, nv + 1);
            he.view_mut((0, 0), (nv, nv)).copy_from(hess);
            he[(nv, nv)] = 1.0;
            let mut ge = DVector::zeros(nv + 1);
            ge.rows_mut(0, nv).copy_from(grad);
            ge[nv] = ELASTIC_WEIGHT;
            let mut ae = DMatrix::zeros(n_lin + n_nl + 1, nv + 1);
            ae.view_mut((0, 0), (n_lin + n_nl, nv)).copy_from(&a);
            for k in 0..n_nl {
                ae[(n_lin + k, nv)] = 1.0;
            }
            ae[(n_lin + n_nl, nv)] = 1.0;
            let mut be = DVector::zeros(n_lin + n_nl + 1);
            be.rows_mut(0, n_lin + n_nl).copy_from(&b);
            let sol = solve_qp(&he, &ge, &ae, &be)
                .map_err(|e| Error::Infeasible(format!("elastic subproblem failed: {e}")))?;
            Ok(Step {
                active: sol.active.len(),
                multipliers: sol.multipliers.rows(n_lin, n_nl).into_owned(),
                d: sol.x.rows(0, nv).into_owned(),
            })
        }
        Err(e) => Err(Error::Infeasible(format!("subproblem failed: {e}"))),
    }
}

/// Solves the horizon problem from `x0`. `target = None` drops the
/// end-effector term. `warm_start` is the previous solution, whose inputs are
/// shifted by one step.
pub fn solve(
    x0: &ActuatorState,
    target: Option<&Vector3<f64>>,
    zone: Option<&SafeZone>,
    params: &MpcParams,
    geom: &RobotGeometry,
    warm_start: Option<&MpcSolution>,
) -> Result<MpcSolution> {
    params.validate()?;
    geom.validate()?;
    if let Some(reason) = initial_violation(x0, zone, params, geom)? {
        return Err(Error::Infeasible(reason));
    }
    let shoot = Shooting::new(*x0, target.copied(), zone, params, geom);
    let nv = shoot.dim();

    let zero = DVector::zeros(nv);
    let mut best_v = zero.clone();
    let mut best = shoot.evaluate(&zero)?;
    let lin_tol = params.constraint_tol * 1e-3;

    let mut v = zero;
    let mut traj = None;
    if let Some(prev) = warm_start {
        let mut shifted: Vec<ActuatorVector> = prev.inputs.iter().skip(1).copied().collect();
        let last = *prev.inputs.last().unwrap();
        while shifted.len() < params.horizon {
            shifted.push(last);
        }
        let cand = shoot.reduce(&shifted);
        if shoot.linear_violation(&cand) <= lin_tol {
            if let Ok(t) = shoot.evaluate(&cand) {
                if t.max_violation() <= params.constraint_tol && t.cost < best.cost {
                    best = shoot.evaluate(&cand)?;
                    best_v = cand.clone();
                }
                v = cand;
                traj = Some(t);
            }
        }
    }
    let mut traj = match traj {
        Some(t) => t,
        None => shoot.evaluate(&v)?,
    };

    let mut mu: f64 = 10.0;
    let mut status = SolverStatus::MaxIter;
    let mut iterations = 0;
    let mut active = 0;
    for _ in 0..params.max_iterations {
        iterations += 1;
        let lin = shoot.linearize(&traj)?;
        let step = qp_step(&shoot, &v, &lin)?;
        let grad = lin.grad;
        active = step.active;
        // Several witness rows can belong to one disk while the merit counts
        // its violation once, so the bound uses the sum of the multipliers.
        let lambda_sum: f64 = step.multipliers.iter().map(|l| l.max(0.0)).sum();
        mu = mu.max(1.1 * lambda_sum + 1.0);

        let d_inf = step.d.amax();
        let feasible = traj.max_violation() <= params.constraint_tol;
        if feasible && d_inf <= 1e-10 * (1.0 + v.amax()) {
            status = SolverStatus::Optimal;
            break;
        }

        let merit0 = traj.cost + mu * traj.violation();
        let slope = grad.dot(&step.d) - mu * traj.violation();
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha >= MIN_STEP {
            let cand = &v + &step.d * alpha;
            if let Ok(t) = shoot.evaluate(&cand) {
                let merit = t.cost + mu * t.violation();
                if merit <= merit0 + ARMIJO * alpha * slope.min(0.0) {
                    accepted = Some((cand, t));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((cand, t)) = accepted else {
            status = if feasible { SolverStatus::Optimal } else { SolverStatus::Stalled };
            if feasible && d_inf > 1e-6 * (1.0 + v.amax()) {
                status = SolverStatus::Stalled;
            }
            break;
        };
        let change = (traj.cost - t.cost).abs();
        let prev_cost = traj.cost;
        v = cand;
        traj = t;
        let feasible = traj.max_violation() <= params.constraint_tol;
        if feasible && traj.cost <= best.cost {
            best_v = v.clone();
            best = shoot.evaluate(&v)?;
        }
        if feasible
            && (change <= params.cost_tol * prev_cost.abs().max(1.0)
                || (alpha * d_inf) <= 1e-10 * (1.0 + v.amax()))
        {
            status = SolverStatus::Optimal;
            break;
        }
    }

    // Fall back to the best feasible iterate when the last one is not.
    let final_traj = if traj.max_violation() <= params.constraint_tol {
        traj
    } else {
        log::debug!("mpc: returning best feasible iterate");
        if status == SolverStatus::Optimal {
            status = SolverStatus::Stalled;
        }
        let _ = &best_v;
        best
    };
    Ok(MpcSolution {
        max_violation: final_traj.max_violation(),
        states: final_traj.states,
        inputs: final_traj.inputs,
        outputs: final_traj.shapes,
        cost: final_traj.cost,
        status,
        iterations,
        active_constraints: active,
    })
}

/// Receding-horizon loop state: parameters, safe zone and the previous
/// solution used for warm starting and state propagation.
#[derive(Debug, Clone)]
pub struct MpcController {
    params: MpcParams,
    geom: RobotGeometry,
    zone: Option<Arc<SafeZone>>,
    start: Option<ActuatorState>,
    previous: Option<MpcSolution>,
}

impl MpcController {
    pub fn new(params: MpcParams, geom: RobotGeometry, zone: Option<Arc<SafeZone>>) -> Result<Self> {
        params.validate()?;
        geom.validate()?;
        Ok(Self {
            params,
            geom,
            zone,
            start: None,
            previous: None,
        })
    }

    /// Starts the nominal system at `state` instead of the centred straight
    /// state.
    pub fn with_initial_state(mut self, state: ActuatorState) -> Self {
        self.start = Some(state);
        self
    }

    pub fn params(&self) -> &MpcParams {
        &self.params
    }

    pub fn geometry(&self) -> &RobotGeometry {
        &self.geom
    }

    pub fn zone(&self) -> Option<&Arc<SafeZone>> {
        self.zone.as_ref()
    }

    pub fn previous(&self) -> Option<&MpcSolution> {
        self.previous.as_ref()
    }

    /// Nominal state the next call to [`step`](Self::step) starts from.
    pub fn nominal_state(&self) -> ActuatorState {
        match (&self.previous, self.start) {
            (None, Some(start)) => start,
            (previous, _) => initialize(previous.as_ref(), &self.geom),
        }
    }

    pub fn step(&mut self, target: Option<&Vector3<f64>>) -> Result<MpcSolution> {
        let x0 = self.nominal_state();
        let sol = solve(
            &x0,
            target,
            self.zone.as_deref(),
            &self.params,
            &self.geom,
            self.previous.as_ref(),
        )?;
        self.previous = Some(sol.clone());
        Ok(sol)
    }

    pub fn reset(&mut self) {
        self.previous = None;
    }
}
