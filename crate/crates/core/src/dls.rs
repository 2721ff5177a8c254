//! Damped-least-squares reference controller with a squared-hinge collision
//! cost on the body disks.

use nalgebra::{SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{
    length_index, shape_jacobians, tendon_index, ActuatorState, ActuatorVector, RobotGeometry,
    RobotShape, ACTUATORS, SEGMENTS, TENDONS_PER_SEGMENT,
};
use crate::sdf::SafeZone;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DlsParams {
    /// Weight c_w of `W = c_w I`.
    pub c_w: f64,
    /// Gain k_j; the law yields a state increment per control tick.
    pub k_j: f64,
    /// Safe distance c_d (mm).
    pub safety_margin: f64,
}

impl Default for DlsParams {
    fn default() -> Self {
        Self {
            c_w: 1.0,
            k_j: 0.05,
            safety_margin: 5.5,
        }
    }
}

impl DlsParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_w > 0.0) || !(self.k_j > 0.0) || !(self.safety_margin > 0.0) {
            return Err(Error::InvalidConfig("DLS c_w, k_j and margin must be positive".into()));
        }
        Ok(())
    }
}

/// `sum over body disks of max(0, c_d - d(p_i))^2`; the tip is excluded.
pub fn collision_cost(shape: &RobotShape, zone: &SafeZone, margin: f64) -> f64 {
    let body = shape.len().saturating_sub(1);
    shape.points[..body]
        .iter()
        .map(|p| {
            let v = (margin - zone.signed_distance(p).distance).max(0.0);
            v * v
        })
        .sum()
}

/// Gradient of [`collision_cost`] with respect to the actuator state.
pub fn collision_gradient(
    state: &ActuatorState,
    zone: &SafeZone,
    margin: f64,
    geom: &RobotGeometry,
) -> Result<ActuatorVector> {
    let shape = crate::kinematics::forward_kinematics(state, geom)?;
    let jacs = shape_jacobians(state, geom)?;
    Ok(gradient_with(&shape, &jacs, zone, margin))
}

fn gradient_with(
    shape: &RobotShape,
    jacs: &[crate::kinematics::DiskJacobian],
    zone: &SafeZone,
    margin: f64,
) -> ActuatorVector {
    let mut grad = ActuatorVector::zeros();
    for (p, j) in shape.points[..shape.len() - 1].iter().zip(jacs) {
        let s = zone.signed_distance(p);
        let hinge = margin - s.distance;
        if hinge > 0.0 {
            grad -= j.transpose() * s.gradient * (2.0 * hinge);
        }
    }
    grad
}

/// Removes the component of each segment's input that would break
/// `3 g_j = sum_m q_jm`.
pub fn project_coupling(u: &ActuatorVector) -> ActuatorVector {
    let mut out = *u;
    let norm_sq = 12.0;
    for j in 0..SEGMENTS {
        let mut dot = -3.0 * u[length_index(j)];
        for m in 0..TENDONS_PER_SEGMENT {
            dot += u[tendon_index(j, m)];
        }
        let c = dot / norm_sq;
        for m in 0..TENDONS_PER_SEGMENT {
            out[tendon_index(j, m)] -= c;
        }
        out[length_index(j)] += 3.0 * c;
    }
    out
}

/// Uniform scale in (0, 1] that brings `u` into the box; 1 when it already fits.
pub fn box_scale(u: &ActuatorVector, min: &ActuatorVector, max: &ActuatorVector) -> f64 {
    let mut scale: f64 = 1.0;
    for i in 0..ACTUATORS {
        if u[i] > max[i] {
            scale = scale.min(max[i] / u[i]);
        } else if u[i] < min[i] {
            scale = scale.min(min[i] / u[i]);
        }
    }
    scale.max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DlsOutput {
    /// Input rate after projection and scaling (mm/s).
    pub input: ActuatorVector,
    /// Collision cost at the measured shape.
    pub collision_cost: f64,
    /// Uniform factor applied to fit the input box (1 when unclamped).
    pub scale: f64,
}

/// One step of the law `k_j (J'J + W)^-1 (J'(p_d - p) - W dh/dx)`, turned into
/// a rate over `dt`, projected onto tendon-consistent inputs and scaled into
/// `[input_min, input_max]`. `zone = None` drops the collision term.
#[allow(clippy::too_many_arguments)]
pub fn dls_step(
    measured: &RobotShape,
    state: &ActuatorState,
    target: &Vector3<f64>,
    zone: Option<&SafeZone>,
    params: &DlsParams,
    geom: &RobotGeometry,
    dt: f64,
    input_min: &ActuatorVector,
    input_max: &ActuatorVector,
) -> Result<DlsOutput> {
    if measured.len() != geom.total_disks() {
        return Err(Error::InvalidInput(format!(
            "measured shape has {} points, geometry has {} disks",
            measured.len(),
            geom.total_disks()
        )));
    }
    let jacs = shape_jacobians(state, geom)?;
    let jac = jacs[jacs.len() - 1];
    let (grad, h) = match zone {
        Some(z) => (
            gradient_with(measured, &jacs, z, params.safety_margin),
            collision_cost(measured, z, params.safety_margin),
        ),
        None => (ActuatorVector::zeros(), 0.0),
    };
    let raw = dls_raw(&jac, &(target - measured.end_effector()), &grad, params);
    let u = project_coupling(&(raw / dt));
    let scale = box_scale(&u, input_min, input_max);
    if scale < 1.0 {
        log::debug!("dls: input scaled by {scale:.4} to fit the box");
    }
    Ok(DlsOutput {
        input: u * scale,
        collision_cost: h,
        scale,
    })
}

/// The unprojected, unclamped increment.
pub fn dls_raw(
    jac: &crate::kinematics::DiskJacobian,
    error: &Vector3<f64>,
    h_grad: &ActuatorVector,
    params: &DlsParams,
) -> ActuatorVector {
    let w = SMatrix::<f64, ACTUATORS, ACTUATORS>::identity() * params.c_w;
    let lhs = jac.transpose() * jac + w;
    let rhs = jac.transpose() * error - h_grad * params.c_w;
    let sol = lhs
        .cholesky()
        .map(|c| c.solve(&rhs))
        .unwrap_or_else(ActuatorVector::zeros);
    sol * params.k_j
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::forward_kinematics;
    use crate::meshgen;

    #[test]
    fn zero_inside_hull() {
        let geom = RobotGeometry::default();
        let (v, t) = meshgen::axis_box(Vector3::new(-100.0, -100.0, -10.0), Vector3::new(100.0, 100.0, 300.0));
        let zone = SafeZone::new(v, t).unwrap();
        let y = forward_kinematics(&geom.centered_state(), &geom).unwrap();
        assert_eq!(collision_cost(&y, &zone, 5.5), 0.0);
    }

    #[test]
    fn single_violation_contributes_square() {
        let (v, t) = meshgen::axis_box(Vector3::new(-100.0, -100.0, -100.0), Vector3::new(100.0, 100.0, 100.0));
        let zone = SafeZone::new(v, t).unwrap();
        let margin = 5.5;
        // d = margin - 2 at x = 100 - 3.5
        let shape = RobotShape::new(vec![
            Vector3::new(100.0 - 3.5, 0.0, 0.0),
            Vector3::zeros(),
            Vector3::new(99.0, 99.0, 99.0),
        ]);
        assert!((collision_cost(&shape, &zone, margin) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn projection_removes_coupling_component() {
        let u = ActuatorVector::from_fn(|i, _| (i as f64 * 1.3).cos());
        let p = project_coupling(&u);
        let x = ActuatorState(p);
        for r in x.coupling_residuals() {
            assert!(r.abs() < 1e-14);
        }
        assert!((project_coupling(&p) - p).amax() < 1e-15);
    }

    #[test]
    fn box_scale_keeps_direction() {
        let u = ActuatorVector::from_fn(|i, _| i as f64 - 5.0);
        let lo = ActuatorVector::repeat(-2.0);
        let hi = ActuatorVector::repeat(2.0);
        let s = box_scale(&u, &lo, &hi);
        assert!((s - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(box_scale(&(u * 0.1), &lo, &hi), 1.0);
    }

    #[test]
    fn at_target_without_violation_input_is_zero() {
        let geom = RobotGeometry::default();
        let x = geom.centered_state();
        let y = forward_kinematics(&x, &geom).unwrap();
        let lo = ActuatorVector::repeat(-2.0);
        let hi = ActuatorVector::repeat(2.0);
        let out = dls_step(&y, &x, &y.end_effector(), None, &DlsParams::default(), &geom, 1.0 / 30.0, &lo, &hi)
            .unwrap();
        assert_eq!(out.input, ActuatorVector::zeros());
    }
}
