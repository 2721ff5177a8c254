//! Piecewise-constant-curvature kinematics for a three-segment tendon-driven
//! continuum robot with extensible segments.
//!
//! The actuator vector stacks, per segment, three absolute tendon lengths
//! followed by the segment (backbone) length:
//!
//! ```text
//! x = (q11, q12, q13, g1, q21, q22, q23, g2, q31, q32, q33, g3)   [mm]
//! ```
//!
//! Each segment bends as a circular arc. A tendon routed at angle `beta_m` on
//! the pitch circle of radius `r_t` has length `q = g (1 - r_t k cos(beta_m - phi))`
//! for curvature `k` and bending-plane angle `phi`.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Matrix3, SMatrix, SVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SEGMENTS: usize = 3;
pub const TENDONS_PER_SEGMENT: usize = 3;
pub const ACTUATORS: usize = SEGMENTS * (TENDONS_PER_SEGMENT + 1);

/// Curvatures below this use the series form of the arc map.
pub const STRAIGHT_CURVATURE: f64 = 1e-8;
/// Finite-difference step for disk Jacobians, in mm.
pub const JACOBIAN_STEP: f64 = 1e-4;

pub type ActuatorVector = SVector<f64, ACTUATORS>;
pub type DiskJacobian = SMatrix<f64, 3, ACTUATORS>;

/// Index of tendon `m` of segment `j` in the actuator vector.
pub const fn tendon_index(segment: usize, tendon: usize) -> usize {
    segment * (TENDONS_PER_SEGMENT + 1) + tendon
}

/// Index of the backbone length of segment `j` in the actuator vector.
pub const fn length_index(segment: usize) -> usize {
    segment * (TENDONS_PER_SEGMENT + 1) + TENDONS_PER_SEGMENT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobotGeometry {
    pub disks_per_segment: usize,
    /// Tendon pitch-circle radius r_t (mm).
    pub tendon_radius: f64,
    /// Routing angles of the three tendons on the disk (rad).
    pub tendon_angles: [f64; TENDONS_PER_SEGMENT],
    pub tendon_min: f64,
    pub tendon_max: f64,
    pub segment_min: f64,
    pub segment_max: f64,
    /// Maximum bending angle per segment (rad); the curvature bound is
    /// `max_bend_angle / segment_length`.
    pub max_bend_angle: f64,
}

impl Default for RobotGeometry {
    fn default() -> Self {
        Self {
            disks_per_segment: 10,
            tendon_radius: 8.0,
            tendon_angles: [0.0, 2.0 * PI / 3.0, 4.0 * PI / 3.0],
            tendon_min: 20.0,
            tendon_max: 140.0,
            segment_min: 40.0,
            segment_max: 100.0,
            max_bend_angle: 2.0 * PI / 3.0,
        }
    }
}

impl RobotGeometry {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(format!("robot geometry: {msg}")));
        if self.disks_per_segment < 2 {
            return bad("disks_per_segment must be at least 2");
        }
        if !(self.tendon_radius > 0.0) {
            return bad("tendon_radius must be positive");
        }
        if !(self.segment_min > 0.0 && self.segment_min < self.segment_max) {
            return bad("segment length limits must satisfy 0 < min < max");
        }
        if !(self.tendon_min < self.tendon_max) {
            return bad("tendon length limits must satisfy min < max");
        }
        if !(self.max_bend_angle > 0.0) {
            return bad("max_bend_angle must be positive");
        }
        for a in 0..TENDONS_PER_SEGMENT {
            for b in a + 1..TENDONS_PER_SEGMENT {
                let diff = (self.tendon_angles[a] - self.tendon_angles[b]).rem_euclid(2.0 * PI);
                if diff < 1e-9 || 2.0 * PI - diff < 1e-9 {
                    return bad("tendon angles must be pairwise distinct modulo 2*pi");
                }
            }
        }
        // The tendon map must be invertible for curvature and plane.
        if self.routing_normal_matrix().determinant().abs() < 1e-12 {
            return bad("tendon angles do not span the bending plane");
        }
        Ok(())
    }

    pub fn total_disks(&self) -> usize {
        SEGMENTS * self.disks_per_segment
    }

    pub fn lower_bounds(&self) -> ActuatorVector {
        ActuatorVector::from_fn(|i, _| {
            if i % (TENDONS_PER_SEGMENT + 1) == TENDONS_PER_SEGMENT {
                self.segment_min
            } else {
                self.tendon_min
            }
        })
    }

    pub fn upper_bounds(&self) -> ActuatorVector {
        ActuatorVector::from_fn(|i, _| {
            if i % (TENDONS_PER_SEGMENT + 1) == TENDONS_PER_SEGMENT {
                self.segment_max
            } else {
                self.tendon_max
            }
        })
    }

    /// Straight configuration with every segment at the centre of its
    /// length range.
    pub fn centered_state(&self) -> ActuatorState {
        let length = 0.5 * (self.segment_min + self.segment_max);
        ActuatorState(ActuatorVector::repeat(length))
    }

    fn routing_normal_matrix(&self) -> Matrix2<f64> {
        let mut m = Matrix2::zeros();
        for beta in self.tendon_angles {
            let v = Vector2::new(beta.cos(), beta.sin());
            m += v * v.transpose();
        }
        m
    }
}

/// Actuator lengths in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActuatorState(pub ActuatorVector);

impl ActuatorState {
    pub fn from_slice(values: &[f64]) -> Result<Self> {
        if values.len() != ACTUATORS {
            return Err(Error::InvalidInput(format!(
                "actuator state needs {ACTUATORS} entries, got {}",
                values.len()
            )));
        }
        Ok(Self(ActuatorVector::from_column_slice(values)))
    }

    pub fn tendon(&self, segment: usize, tendon: usize) -> f64 {
        self.0[tendon_index(segment, tendon)]
    }

    pub fn segment_length(&self, segment: usize) -> f64 {
        self.0[length_index(segment)]
    }

    /// `3 g_j - sum_m q_jm` for each segment; zero for a tendon-consistent state.
    pub fn coupling_residuals(&self) -> [f64; SEGMENTS] {
        std::array::from_fn(|j| {
            let tendons: f64 = (0..TENDONS_PER_SEGMENT).map(|m| self.tendon(j, m)).sum();
            3.0 * self.segment_length(j) - tendons
        })
    }

    pub fn within_bounds(&self, geom: &RobotGeometry) -> bool {
        let lo = geom.lower_bounds();
        let hi = geom.upper_bounds();
        (0..ACTUATORS).all(|i| self.0[i] >= lo[i] && self.0[i] <= hi[i])
    }

    pub fn clamp_to_bounds(&self, geom: &RobotGeometry) -> (Self, bool) {
        let lo = geom.lower_bounds();
        let hi = geom.upper_bounds();
        let mut clamped = false;
        let x = ActuatorVector::from_fn(|i, _| {
            let v = self.0[i].clamp(lo[i], hi[i]);
            clamped |= v != self.0[i];
            v
        });
        (Self(x), clamped)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentArc {
    /// Curvature (1/mm), non-negative.
    pub curvature: f64,
    /// Bending-plane angle in [-pi, pi); zero for a straight segment.
    pub bend_plane: f64,
    /// Arc length (mm).
    pub length: f64,
}

impl SegmentArc {
    pub fn straight(length: f64) -> Self {
        Self {
            curvature: 0.0,
            bend_plane: 0.0,
            length,
        }
    }

    pub fn bend_angle(&self) -> f64 {
        self.curvature * self.length
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArcParameters {
    pub segments: [SegmentArc; SEGMENTS],
}

/// Ordered disk positions p_1..p_{3n} in the base frame (mm). The base disk at
/// the origin is implicit.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RobotShape {
    pub points: Vec<Vector3<f64>>,
}

impl RobotShape {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn end_effector(&self) -> Vector3<f64> {
        *self.points.last().expect("robot shape has no disks")
    }

    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
    }
}

/// Least-squares fit of the per-segment tendon offsets `q_m - g` to
/// `c_m A + s_m B`, where `(A, B) = -g r_t k (cos phi, sin phi)`.
fn fit_bending(geom: &RobotGeometry, offsets: [f64; TENDONS_PER_SEGMENT]) -> Vector2<f64> {
    let normal = geom.routing_normal_matrix();
    let mut rhs = Vector2::zeros();
    for (beta, off) in geom.tendon_angles.iter().zip(offsets) {
        rhs += Vector2::new(beta.cos(), beta.sin()) * off;
    }
    normal
        .try_inverse()
        .expect("validated geometry has an invertible routing matrix")
        * rhs
}

/// Coefficients mapping tendon offsets of one segment to the bending vector
/// `(A, B)`; row 0 gives A, row 1 gives B.
pub(crate) fn bending_coefficients(geom: &RobotGeometry) -> SMatrix<f64, 2, TENDONS_PER_SEGMENT> {
    let inv = geom
        .routing_normal_matrix()
        .try_inverse()
        .expect("validated geometry has an invertible routing matrix");
    let mut routing = SMatrix::<f64, 2, TENDONS_PER_SEGMENT>::zeros();
    for (m, beta) in geom.tendon_angles.iter().enumerate() {
        routing[(0, m)] = beta.cos();
        routing[(1, m)] = beta.sin();
    }
    inv * routing
}

fn segment_offsets(state: &ActuatorState, segment: usize) -> [f64; TENDONS_PER_SEGMENT] {
    let length = state.segment_length(segment);
    std::array::from_fn(|m| state.tendon(segment, m) - length)
}

pub fn actuators_to_arcs(state: &ActuatorState, geom: &RobotGeometry) -> Result<ArcParameters> {
    if let Some(i) = state.0.iter().position(|x| !x.is_finite()) {
        return Err(Error::InvalidState(format!("actuator {i} is not finite")));
    }
    let mut segments = [SegmentArc::straight(0.0); SEGMENTS];
    for (j, arc) in segments.iter_mut().enumerate() {
        let length = state.segment_length(j);
        if !(length > 0.0) || !length.is_finite() {
            return Err(Error::InvalidState(format!(
                "segment {} has non-positive length {length}",
                j + 1
            )));
        }
        let ab = fit_bending(geom, segment_offsets(state, j));
        let bend = ab.norm() / geom.tendon_radius;
        let curvature = bend / length;
        if curvature * geom.tendon_radius >= 1.0 {
            return Err(Error::KinematicLimit(format!(
                "segment {} curvature {curvature:.6} exceeds 1/r_t",
                j + 1
            )));
        }
        let bend_plane = if curvature == 0.0 {
            0.0
        } else {
            wrap_angle((-ab.y).atan2(-ab.x))
        };
        *arc = SegmentArc {
            curvature,
            bend_plane,
            length,
        };
    }
    Ok(ArcParameters { segments })
}

/// Tendon lengths implied by the arc parameters (the tendon-consistent
/// projection of any state that maps to these arcs).
pub fn arcs_to_tendons(arcs: &ArcParameters, geom: &RobotGeometry) -> ActuatorState {
    let mut x = ActuatorVector::zeros();
    for (j, arc) in arcs.segments.iter().enumerate() {
        for (m, beta) in geom.tendon_angles.iter().enumerate() {
            x[tendon_index(j, m)] = arc.length
                * (1.0 - geom.tendon_radius * arc.curvature * (beta - arc.bend_plane).cos());
        }
        x[length_index(j)] = arc.length;
    }
    ActuatorState(x)
}

/// Maps an angle to [-pi, pi).
fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        -PI
    } else {
        w
    }
}

/// Radial and axial offsets after arc length `s` along an arc of curvature `k`.
fn arc_offsets(curvature: f64, s: f64) -> (f64, f64) {
    if curvature < STRAIGHT_CURVATURE {
        (
            0.5 * curvature * s * s,
            s - curvature * curvature * s * s * s / 6.0,
        )
    } else {
        let theta = curvature * s;
        let half = (0.5 * theta).sin();
        (2.0 * half * half / curvature, theta.sin() / curvature)
    }
}

fn arc_point(arc: &SegmentArc, s: f64) -> Vector3<f64> {
    let (radial, axial) = arc_offsets(arc.curvature, s);
    let (sp, cp) = arc.bend_plane.sin_cos();
    Vector3::new(cp * radial, sp * radial, axial)
}

/// Frame rotation accumulated along the full arc: Rz(phi) Ry(theta) Rz(-phi).
fn arc_rotation(arc: &SegmentArc) -> Matrix3<f64> {
    let (sp, cp) = arc.bend_plane.sin_cos();
    let (st, ct) = arc.bend_angle().sin_cos();
    Matrix3::new(
        cp * cp * ct + sp * sp,
        cp * sp * (ct - 1.0),
        cp * st,
        cp * sp * (ct - 1.0),
        sp * sp * ct + cp * cp,
        sp * st,
        -cp * st,
        -sp * st,
        ct,
    )
}

pub fn arcs_to_shape(arcs: &ArcParameters, geom: &RobotGeometry) -> RobotShape {
    let n = geom.disks_per_segment;
    let mut points = Vec::with_capacity(SEGMENTS * n);
    let mut rotation = Matrix3::identity();
    let mut origin = Vector3::zeros();
    for arc in &arcs.segments {
        for i in 1..=n {
            let s = arc.length * i as f64 / n as f64;
            points.push(origin + rotation * arc_point(arc, s));
        }
        origin += rotation * arc_point(arc, arc.length);
        rotation *= arc_rotation(arc);
    }
    RobotShape { points }
}

pub fn forward_kinematics(state: &ActuatorState, geom: &RobotGeometry) -> Result<RobotShape> {
    Ok(arcs_to_shape(&actuators_to_arcs(state, geom)?, geom))
}

pub fn segment_curvature(state: &ActuatorState, geom: &RobotGeometry, segment: usize) -> Result<f64> {
    if segment >= SEGMENTS {
        return Err(Error::InvalidInput(format!("segment index {segment} out of range")));
    }
    Ok(actuators_to_arcs(state, geom)?.segments[segment].curvature)
}

/// Jacobians of every disk position with respect to the actuator vector, by
/// central differences (one-sided at the box limits).
pub fn shape_jacobians(state: &ActuatorState, geom: &RobotGeometry) -> Result<Vec<DiskJacobian>> {
    let lo = geom.lower_bounds();
    let hi = geom.upper_bounds();
    let disks = geom.total_disks();
    let mut jacobians = vec![DiskJacobian::zeros(); disks];
    let mut base: Option<RobotShape> = None;
    for k in 0..ACTUATORS {
        let h = JACOBIAN_STEP;
        let x = state.0[k];
        let forward_ok = x + h <= hi[k];
        let backward_ok = x - h >= lo[k];
        let (plus, minus, width) = match (forward_ok, backward_ok) {
            (true, true) | (false, false) => (x + h, x - h, 2.0 * h),
            (true, false) => (x + h, x, h),
            (false, true) => (x, x - h, h),
        };
        let eval = |v: f64, base: &mut Option<RobotShape>| -> Result<RobotShape> {
            if v == x {
                if base.is_none() {
                    *base = Some(forward_kinematics(state, geom)?);
                }
                return Ok(base.clone().unwrap());
            }
            let mut perturbed = *state;
            perturbed.0[k] = v;
            forward_kinematics(&perturbed, geom)
        };
        let fp = eval(plus, &mut base)?;
        let fm = eval(minus, &mut base)?;
        for (i, jac) in jacobians.iter_mut().enumerate() {
            let col = (fp.points[i] - fm.points[i]) / width;
            jac.set_column(k, &col);
        }
    }
    Ok(jacobians)
}

/// Jacobian of disk `disk` (1-based, `3n` is the end effector).
pub fn disk_jacobian(state: &ActuatorState, geom: &RobotGeometry, disk: usize) -> Result<DiskJacobian> {
    if disk == 0 || disk > geom.total_disks() {
        return Err(Error::InvalidInput(format!("disk index {disk} out of range")));
    }
    Ok(shape_jacobians(state, geom)?[disk - 1])
}
