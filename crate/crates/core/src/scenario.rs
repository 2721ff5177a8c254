//! Scenario configuration read from TOML. See `docs/config.md` for the schema.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::dls::DlsParams;
use crate::error::{Error, Result};
use crate::kinematics::{ActuatorState, ActuatorVector, RobotGeometry, ACTUATORS, TENDONS_PER_SEGMENT};
use crate::local::LocalGains;
use crate::mpc::MpcParams;
use crate::plant::DisturbanceSpec;
use crate::sdf::SafeZone;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    #[default]
    Mpc,
    Dls,
}

impl std::str::FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mpc" => Ok(Self::Mpc),
            "dls" => Ok(Self::Dls),
            other => Err(Error::InvalidConfig(format!("unknown controller '{other}'"))),
        }
    }
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mpc => "mpc",
            Self::Dls => "dls",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementMode {
    /// Every disk is measured.
    #[default]
    Full,
    /// Only the end effector is measured.
    EeOnly,
}

/// Weight matrix given as a scalar multiple of identity, a diagonal or a full
/// row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Weight {
    Scalar(f64),
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl Weight {
    pub fn to_matrix<const D: usize>(&self, name: &str) -> Result<SMatrix<f64, D, D>> {
        let bad = |m: String| Error::InvalidConfig(format!("weight {name}: {m}"));
        match self {
            Weight::Scalar(s) => Ok(SMatrix::identity() * *s),
            Weight::Diagonal(d) => {
                if d.len() != D {
                    return Err(bad(format!("expected {D} diagonal entries, got {}", d.len())));
                }
                Ok(SMatrix::from_diagonal(&nalgebra::SVector::<f64, D>::from_column_slice(d)))
            }
            Weight::Full(rows) => {
                if rows.len() != D || rows.iter().any(|r| r.len() != D) {
                    return Err(bad(format!("expected a {D}x{D} matrix")));
                }
                Ok(SMatrix::from_fn(|i, j| rows[i][j]))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon: usize,
    pub q: Weight,
    pub r: Weight,
    pub s: Weight,
    /// Rate limit for tendon inputs (mm/s).
    pub tendon_rate: f64,
    /// Rate limit for backbone inputs (mm/s).
    pub backbone_rate: f64,
    pub constraint_tol: f64,
    pub cost_tol: f64,
    pub max_iterations: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        let p = MpcParams::default();
        Self {
            horizon: p.horizon,
            q: Weight::Scalar(1000.0),
            r: Weight::Scalar(10.0),
            s: Weight::Scalar(10.0),
            tendon_rate: p.input_max[0],
            backbone_rate: p.input_max[3],
            constraint_tol: p.constraint_tol,
            cost_tol: p.cost_tol,
            max_iterations: p.max_iterations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    /// Target position (mm), absolute or relative to the initial end effector.
    pub position: [f64; 3],
    #[serde(default)]
    pub relative: bool,
    /// Convergence radius on the measured end-effector error (mm).
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// Consecutive ticks inside the tolerance needed to count as reached.
    #[serde(default = "default_dwell")]
    pub dwell: usize,
}

fn default_tolerance() -> f64 {
    2.0
}

fn default_dwell() -> usize {
    15
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub controller: ControllerKind,
    /// Control rate (Hz); also the MPC sample rate.
    pub rate: f64,
    /// Simulated duration (s).
    pub duration: f64,
    /// Safe distance c_d shared by both controllers (mm).
    pub safety_margin: f64,
    /// Safe-zone mesh; relative paths resolve against the config file.
    pub mesh: Option<PathBuf>,
    pub measurement: MeasurementMode,
    /// Initial actuator state; the centred straight state when absent.
    pub initial_state: Option<Vec<f64>>,
    pub geometry: RobotGeometry,
    pub mpc: MpcConfig,
    pub local: LocalGains,
    pub dls: DlsConfig,
    pub disturbance: DisturbanceSpec,
    pub waypoints: Vec<Waypoint>,
    /// Write `shapes.jsonl` next to the metrics.
    pub dump_shapes: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DlsConfig {
    pub c_w: f64,
    pub k_j: f64,
}

impl Default for DlsConfig {
    fn default() -> Self {
        let d = DlsParams::default();
        Self { c_w: d.c_w, k_j: d.k_j }
    }
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "scenario".into(),
            controller: ControllerKind::Mpc,
            rate: 30.0,
            duration: 20.0,
            safety_margin: MpcParams::default().safety_margin,
            mesh: None,
            measurement: MeasurementMode::Full,
            initial_state: None,
            geometry: RobotGeometry::default(),
            mpc: MpcConfig::default(),
            local: LocalGains::default(),
            dls: DlsConfig::default(),
            disturbance: DisturbanceSpec::default(),
            waypoints: Vec::new(),
            dump_shapes: false,
        }
    }
}

impl ScenarioConfig {
    /// Reads a config file; a relative mesh path is resolved against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::InvalidConfig(message) => Error::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })?;
        if let Some(mesh) = &cfg.mesh {
            if mesh.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.mesh = Some(base.join(mesh));
            }
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serialisable")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.rate > 0.0) || !self.rate.is_finite() {
            return bad("control rate must be positive".into());
        }
        if !(self.duration >= 0.0) || !self.duration.is_finite() {
            return bad("duration must be non-negative".into());
        }
        self.geometry.validate()?;
        self.local.validate()?;
        self.disturbance.validate()?;
        for (i, w) in self.waypoints.iter().enumerate() {
            if w.position.iter().any(|v| !v.is_finite()) {
                return bad(format!("waypoint {} is not finite", i + 1));
            }
            if !(w.tolerance > 0.0) || w.dwell == 0 {
                return bad(format!("waypoint {} needs a positive tolerance and dwell", i + 1));
            }
        }
        if let Some(x) = &self.initial_state {
            if x.len() != ACTUATORS {
                return bad(format!("initial_state needs {ACTUATORS} entries"));
            }
        }
        self.mpc_params()?.validate()?;
        self.dls_params().validate()?;
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.rate
    }

    pub fn ticks(&self) -> usize {
        (self.duration * self.rate).round() as usize
    }

    pub fn mpc_params(&self) -> Result<MpcParams> {
        let m = &self.mpc;
        let limit = ActuatorVector::from_fn(|i, _| {
            if i % (TENDONS_PER_SEGMENT + 1) == TENDONS_PER_SEGMENT {
                m.backbone_rate
            } else {
                m.tendon_rate
            }
        });
        Ok(MpcParams {
            horizon: m.horizon,
            dt: self.dt(),
            q: m.q.to_matrix("q")?,
            r: m.r.to_matrix("r")?,
            s: m.s.to_matrix("s")?,
            safety_margin: self.safety_margin,
            input_min: -limit,
            input_max: limit,
            constraint_tol: m.constraint_tol,
            cost_tol: m.cost_tol,
            max_iterations: m.max_iterations,
        })
    }

    pub fn dls_params(&self) -> DlsParams {
        DlsParams {
            c_w: self.dls.c_w,
            k_j: self.dls.k_j,
            safety_margin: self.safety_margin,
        }
    }

    pub fn initial_state(&self) -> Result<ActuatorState> {
        match &self.initial_state {
            Some(x) => ActuatorState::from_slice(x),
            None => Ok(self.geometry.centered_state()),
        }
    }

    pub fn load_zone(&self) -> Result<Option<Arc<SafeZone>>> {
        match &self.mesh {
            Some(path) => Ok(Some(Arc::new(SafeZone::load(path)?))),
            None => Ok(None),
        }
    }

    /// Waypoint targets with relative entries resolved against `origin`.
    pub fn targets(&self, origin: &Vector3<f64>) -> Vec<Vector3<f64>> {
        self.waypoints
            .iter()
            .map(|w| {
                let p = Vector3::from(w.position);
                if w.relative {
                    origin + p
                } else {
                    p
                }
            })
            .collect()
    }
}
