//! Hierarchical task-space control of a three-segment tendon-driven
//! continuum robot: a nominal model predictive controller with hard
//! whole-body mesh constraints, a pseudo-inverse local feedback law, a
//! damped-least-squares reference controller, a disturbed quasi-static plant
//! simulator, an experiment harness and a teleoperation service.

pub mod dls;
pub mod error;
pub mod harness;
pub mod kinematics;
pub mod local;
pub mod meshgen;
pub mod mpc;
pub mod plant;
pub mod qp;
pub mod scenario;
pub mod sdf;
#[cfg(feature = "teleop")]
pub mod teleop;

pub use error::{Error, Result};
pub use kinematics::{ActuatorState, ArcParameters, RobotGeometry, RobotShape, SegmentArc};
pub use sdf::{SafeZone, SdfResult};
