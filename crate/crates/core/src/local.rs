//! Local feedback law that pulls the measured shape towards the nominal one:
//! end-effector correction through a damped pseudo-inverse plus a body
//! correction projected into its null space.

use nalgebra::{SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{
    shape_jacobians, ActuatorState, ActuatorVector, DiskJacobian, RobotGeometry, RobotShape,
    ACTUATORS,
};

pub type PseudoInverse = SMatrix<f64, ACTUATORS, 3>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalGains {
    pub k_ee: f64,
    pub k_body: f64,
    /// Damping of the pseudo-inverse.
    pub damping: f64,
}

impl Default for LocalGains {
    fn default() -> Self {
        Self {
            k_ee: 2.0,
            k_body: 0.5,
            damping: 1e-2,
        }
    }
}

impl LocalGains {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_ee >= 0.0) || !(self.k_body >= 0.0) || !(self.damping > 0.0) {
            return Err(Error::InvalidConfig(
                "local gains must be non-negative and damping positive".into(),
            ));
        }
        Ok(())
    }
}

/// `(J'J + damping I)^-1 J'`.
pub fn damped_pseudoinverse(jac: &DiskJacobian, damping: f64) -> PseudoInverse {
    // (J'J + dI)^-1 J' = J' (J J' + dI)^-1 for d > 0; the 3x3 form is cheaper.
    let gram = jac * jac.transpose() + nalgebra::Matrix3::identity() * damping;
    match gram.cholesky() {
        Some(chol) => jac.transpose() * chol.inverse(),
        None => PseudoInverse::zeros(),
    }
}

fn check_lengths(nominal: &RobotShape, measured: &RobotShape) -> Result<()> {
    if nominal.len() != measured.len() || nominal.is_empty() {
        return Err(Error::InvalidInput(format!(
            "shape lengths differ: nominal {}, measured {}",
            nominal.len(),
            measured.len()
        )));
    }
    Ok(())
}

/// Mean squared deviation of every disk except the tip.
pub fn body_error(nominal: &RobotShape, measured: &RobotShape) -> Result<f64> {
    check_lengths(nominal, measured)?;
    let body = nominal.len() - 1;
    if body == 0 {
        return Ok(0.0);
    }
    let sum: f64 = nominal.points[..body]
        .iter()
        .zip(&measured.points[..body])
        .map(|(a, b)| (a - b).norm_squared())
        .sum();
    Ok(sum / body as f64)
}

fn body_gradient_with(
    nominal: &RobotShape,
    measured: &RobotShape,
    jacobians: &[DiskJacobian],
) -> ActuatorVector {
    let body = nominal.len() - 1;
    let mut grad = ActuatorVector::zeros();
    for i in 0..body {
        grad += jacobians[i].transpose() * (nominal.points[i] - measured.points[i]);
    }
    grad * (2.0 / body as f64)
}

/// Gradient of [`body_error`] with respect to the nominal state whose shape
/// is `nominal`.
pub fn body_error_gradient(
    nominal_state: &ActuatorState,
    measured: &RobotShape,
    geom: &RobotGeometry,
) -> Result<ActuatorVector> {
    let nominal = crate::kinematics::forward_kinematics(nominal_state, geom)?;
    check_lengths(&nominal, measured)?;
    let jacs = shape_jacobians(nominal_state, geom)?;
    Ok(body_gradient_with(&nominal, measured, &jacs))
}

/// Local input for the nominal shape `nominal` (predicted at `state`) and the
/// measurement `measured`. A measurement holding only the tip switches the
/// body term off.
pub fn local_control(
    nominal: &RobotShape,
    measured: &RobotShape,
    state: &ActuatorState,
    gains: &LocalGains,
    geom: &RobotGeometry,
) -> Result<ActuatorVector> {
    let ee_only = measured.len() == 1;
    if !ee_only {
        check_lengths(nominal, measured)?;
    }
    if nominal.len() != geom.total_disks() {
        return Err(Error::InvalidInput(format!(
            "nominal shape has {} points, geometry has {} disks",
            nominal.len(),
            geom.total_disks()
        )));
    }
    let jacs = shape_jacobians(state, geom)?;
    let jac = jacs[jacs.len() - 1];
    let pinv = damped_pseudoinverse(&jac, gains.damping);
    let delta_ee: Vector3<f64> = nominal.end_effector() - measured.end_effector();
    let mut u = pinv * delta_ee * gains.k_ee;
    if !ee_only && gains.k_body != 0.0 {
        let grad = body_gradient_with(nominal, measured, &jacs);
        let projector = SMatrix::<f64, ACTUATORS, ACTUATORS>::identity() - pinv * jac;
        u += projector * grad * gains.k_body;
    }
    Ok(u)
}
