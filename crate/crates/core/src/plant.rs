//! Quasi-static simulated robot: integrates inputs, holds clipped Gaussian
//! disturbances between redraws and returns disturbed measurements
//! `y = f(x + w_x) + w_y`.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{forward_kinematics, ActuatorState, ActuatorVector, RobotGeometry, RobotShape, ACTUATORS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisturbanceSpec {
    /// Standard deviation of the state disturbance (mm).
    pub sigma_x: f64,
    /// Standard deviation of the output disturbance (mm).
    pub sigma_y: f64,
    pub max_x: f64,
    pub max_y: f64,
    /// Redraw frequency (Hz).
    pub rate: f64,
    pub seed: u64,
}

impl Default for DisturbanceSpec {
    fn default() -> Self {
        Self {
            sigma_x: 0.2,
            sigma_y: 1.0,
            max_x: 2.0,
            max_y: 5.0,
            rate: 5.0,
            seed: 0,
        }
    }
}

impl DisturbanceSpec {
    pub fn none() -> Self {
        Self {
            sigma_x: 0.0,
            sigma_y: 0.0,
            max_x: 0.0,
            max_y: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.sigma_x, self.sigma_y].iter().all(|v| v.is_finite());
        if !finite || self.sigma_x < 0.0 || self.sigma_y < 0.0 || !(self.max_x >= 0.0) || !(self.max_y >= 0.0) {
            return Err(Error::InvalidConfig(
                "disturbance deviations and bounds must be non-negative".into(),
            ));
        }
        if !(self.rate > 0.0) || !self.rate.is_finite() {
            return Err(Error::InvalidConfig("disturbance rate must be positive".into()));
        }
        Ok(())
    }
}

pub fn apply_disturbance_state(x: &ActuatorVector, w_x: &ActuatorVector) -> ActuatorVector {
    x + w_x
}

#[derive(Debug, Clone)]
pub struct Plant {
    geom: RobotGeometry,
    spec: DisturbanceSpec,
    x: ActuatorState,
    w_x: ActuatorVector,
    w_y: Vec<Vector3<f64>>,
    time: f64,
    /// Index of the disturbance period currently held.
    period: u64,
    rng: ChaCha8Rng,
    normal_x: Normal<f64>,
    normal_y: Normal<f64>,
    clamp_events: u64,
}

impl Plant {
    /// Plant at state `x0` with the first disturbance drawn at `t = 0`.
    pub fn new(x0: ActuatorState, spec: DisturbanceSpec, geom: RobotGeometry) -> Result<Self> {
        spec.validate()?;
        geom.validate()?;
        let bad = |e: rand_distr::NormalError| Error::InvalidConfig(e.to_string());
        let mut plant = Self {
            w_y: vec![Vector3::zeros(); geom.total_disks()],
            geom,
            spec,
            x: x0,
            w_x: ActuatorVector::zeros(),
            time: 0.0,
            period: 0,
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            normal_x: Normal::new(0.0, spec.sigma_x).map_err(bad)?,
            normal_y: Normal::new(0.0, spec.sigma_y).map_err(bad)?,
            clamp_events: 0,
        };
        plant.redraw();
        Ok(plant)
    }

    fn redraw(&mut self) {
        let (mx, my) = (self.spec.max_x, self.spec.max_y);
        for i in 0..ACTUATORS {
            self.w_x[i] = self.normal_x.sample(&mut self.rng).clamp(-mx, mx);
        }
        for w in &mut self.w_y {
            for k in 0..3 {
                w[k] = self.normal_y.sample(&mut self.rng).clamp(-my, my);
            }
        }
    }

    /// Integrates `u` over `dt`, clamps at the actuator box, redraws the
    /// disturbances when a new period starts and returns the measurement.
    pub fn step(&mut self, u: &ActuatorVector, dt: f64) -> Result<RobotShape> {
        if u.iter().any(|v| !v.is_finite()) || !(dt > 0.0) {
            return Err(Error::InvalidInput("plant input must be finite".into()));
        }
        let (x, clamped) = ActuatorState(self.x.0 + u * dt).clamp_to_bounds(&self.geom);
        if clamped {
            self.clamp_events += 1;
            log::warn!("plant: actuator state clamped at t = {:.3} s", self.time + dt);
        }
        self.x = x;
        self.time += dt;
        // small slack so that accumulated rounding does not delay a redraw
        let period = (self.time * self.spec.rate + 1e-9).floor() as u64;
        while self.period < period {
            self.period += 1;
            self.redraw();
        }
        self.measure()
    }

    pub fn measure(&self) -> Result<RobotShape> {
        let disturbed = ActuatorState(apply_disturbance_state(&self.x.0, &self.w_x));
        let mut y = forward_kinematics(&disturbed, &self.geom)?;
        for (p, w) in y.points.iter_mut().zip(&self.w_y) {
            *p += w;
        }
        Ok(y)
    }

    pub fn measure_ee_only(&self) -> Result<Vector3<f64>> {
        Ok(self.measure()?.end_effector())
    }

    /// Undisturbed shape of the true state.
    pub fn true_shape(&self) -> Result<RobotShape> {
        forward_kinematics(&self.x, &self.geom)
    }

    pub fn state(&self) -> &ActuatorState {
        &self.x
    }

    pub fn state_disturbance(&self) -> &ActuatorVector {
        &self.w_x
    }

    pub fn output_disturbance(&self) -> &[Vector3<f64>] {
        &self.w_y
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn clamp_events(&self) -> u64 {
        self.clamp_events
    }

    pub fn spec(&self) -> &DisturbanceSpec {
        &self.spec
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_spec_measures_kinematics() {
        let geom = RobotGeometry::default();
        let x = geom.centered_state();
        let mut plant = Plant::new(x, DisturbanceSpec::none(), geom.clone()).unwrap();
        let y = plant.step(&ActuatorVector::zeros(), 1.0 / 30.0).unwrap();
        assert_eq!(y, forward_kinematics(&x, &geom).unwrap());
        assert_eq!(plant.measure_ee_only().unwrap(), y.end_effector());
    }

    #[test]
    fn integrates_input() {
        let geom = RobotGeometry::default();
        let mut plant = Plant::new(geom.centered_state(), DisturbanceSpec::none(), geom).unwrap();
        let mut u = ActuatorVector::zeros();
        u[3] = 1.0;
        for _ in 0..30 {
            plant.step(&u, 1.0 / 30.0).unwrap();
        }
        assert!((plant.state().0[3] - 71.0).abs() < 1e-12);
        // quasi-static: zero input leaves the state alone
        let before = *plant.state();
        plant.step(&ActuatorVector::zeros(), 1.0 / 30.0).unwrap();
        plant.step(&ActuatorVector::zeros(), 1.0 / 30.0).unwrap();
        assert_eq!(*plant.state(), before);
    }

    #[test]
    fn clamps_at_box() {
        let geom = RobotGeometry::default();
        let mut plant = Plant::new(geom.centered_state(), DisturbanceSpec::none(), geom).unwrap();
        let u = ActuatorVector::repeat(1000.0);
        plant.step(&u, 1.0).unwrap();
        assert_eq!(plant.state().0[3], 100.0);
        assert_eq!(plant.state().0[0], 140.0);
        assert_eq!(plant.clamp_events(), 1);
    }

    #[test]
    fn disturbances_hold_between_redraws() {
        let geom = RobotGeometry::default();
        let mut plant = Plant::new(geom.centered_state(), DisturbanceSpec::default(), geom).unwrap();
        let dt = 1.0 / 30.0;
        let mut prev = *plant.state_disturbance();
        let mut changes = Vec::new();
        for k in 1..=60 {
            plant.step(&ActuatorVector::zeros(), dt).unwrap();
            if *plant.state_disturbance() != prev {
                changes.push(k);
                prev = *plant.state_disturbance();
            }
        }
        assert_eq!(changes, vec![6, 12, 18, 24, 30, 36, 42, 48, 54, 60]);
    }

    #[test]
    fn bounds_hold() {
        let geom = RobotGeometry::default();
        let spec = DisturbanceSpec {
            sigma_x: 3.0,
            sigma_y: 10.0,
            ..DisturbanceSpec::default()
        };
        let mut plant = Plant::new(geom.centered_state(), spec, geom).unwrap();
        for _ in 0..100 {
            plant.step(&ActuatorVector::zeros(), 0.2).unwrap();
            assert!(plant.state_disturbance().amax() <= 2.0);
            assert!(plant.output_disturbance().iter().all(|w| w.amax() <= 5.0));
        }
    }
}
