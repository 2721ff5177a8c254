//! C ABI over `tdcr-core`.
//!
//! Every object crosses the boundary as an opaque pointer created by a
//! `*_new`/`*_load` function and released by the matching `*_free`. Every
//! function returns a [`TdcrStatus`]; on failure a message is available from
//! [`tdcr_last_error`] on the same thread. Panics never unwind into C, they
//! are reported as [`TdcrStatus::Panic`].
//!
//! Points and vectors are `double[3]` in millimetres. Actuator vectors are
//! `double[12]`: three tendons then the segment length, for each segment from
//! the base.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use nalgebra::Vector3;
use tdcr_core::harness::ClosedLoop;
use tdcr_core::kinematics::{forward_kinematics, ActuatorState, ACTUATORS};
use tdcr_core::mpc::{MpcController, SolverStatus};
use tdcr_core::scenario::ScenarioConfig;
use tdcr_core::{Error, SafeZone};

/// Length of an actuator vector.
pub const TDCR_ACTUATORS: usize = 12;
const _: () = assert!(TDCR_ACTUATORS == ACTUATORS);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TdcrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// Output buffer too small; the required size was written back.
    BufferTooSmall = 3,
    InvalidState = 4,
    KinematicLimit = 5,
    InvalidConfig = 6,
    MeshInvalid = 7,
    Parse = 8,
    /// The controller has no feasible solution from its current state.
    Infeasible = 9,
    Io = 10,
    Panic = 99,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TdcrSolverStatus {
    Optimal = 0,
    MaxIter = 1,
    Stalled = 2,
    Infeasible = 3,
}

impl From<SolverStatus> for TdcrSolverStatus {
    fn from(s: SolverStatus) -> Self {
        match s {
            SolverStatus::Optimal => Self::Optimal,
            SolverStatus::MaxIter => Self::MaxIter,
            SolverStatus::Stalled => Self::Stalled,
            SolverStatus::Infeasible => Self::Infeasible,
        }
    }
}

/// Signed distance query result. Positive inside the zone.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct TdcrDistance {
    pub distance: f64,
    pub gradient: [f64; 3],
    pub closest: [f64; 3],
}

/// One planned step of a controller.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct TdcrMpcStep {
    /// First planned input (actuator velocity).
    pub input: [f64; TDCR_ACTUATORS],
    /// Nominal state the plan starts from.
    pub nominal_state: [f64; TDCR_ACTUATORS],
    pub status: TdcrSolverStatus,
    pub iterations: u32,
    pub cost: f64,
    /// Largest constraint violation over the horizon (mm).
    pub max_violation: f64,
}

/// One closed-loop tick. Errors are NaN when no target was given.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct TdcrTick {
    pub tick: u64,
    pub time: f64,
    /// Applied input, feedforward plus local feedback.
    pub input: [f64; TDCR_ACTUATORS],
    pub end_effector_measured: [f64; 3],
    pub end_effector_nominal: [f64; 3],
    pub error_measured: f64,
    pub error_nominal: f64,
    /// Smallest clearance to the margin; NaN without a zone.
    pub clearance_measured: f64,
    pub clearance_nominal: f64,
    pub status: TdcrSolverStatus,
    pub iterations: u32,
    pub solve_seconds: f64,
    /// Non-zero when the solver faulted on this tick.
    pub faulted: u8,
}

pub struct TdcrConfig {
    inner: ScenarioConfig,
}

pub struct TdcrZone {
    inner: Arc<SafeZone>,
}

pub struct TdcrMpc {
    inner: MpcController,
}

pub struct TdcrSimulation {
    inner: ClosedLoop,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(TdcrStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidState(_) => TdcrStatus::InvalidState,
            Error::KinematicLimit(_) => TdcrStatus::KinematicLimit,
            Error::InvalidInput(_) => TdcrStatus::InvalidArgument,
            Error::InvalidConfig(_) => TdcrStatus::InvalidConfig,
            Error::MeshInvalid { .. } => TdcrStatus::MeshInvalid,
            Error::Parse { .. } => TdcrStatus::Parse,
            Error::Infeasible(_) => TdcrStatus::Infeasible,
            Error::Io(_) => TdcrStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: TdcrStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TdcrStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TdcrStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            TdcrStatus::Panic
        }
    }
}

unsafe fn get<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| fail(TdcrStatus::NullPointer, format!("{name} is null")))
}

unsafe fn get_mut<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| fail(TdcrStatus::NullPointer, format!("{name} is null")))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    let p = get(p, name)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(TdcrStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

unsafe fn point_arg(p: *const f64, name: &str) -> Result<Vector3<f64>, Failure> {
    get(p, name)?;
    let v = Vector3::from_column_slice(std::slice::from_raw_parts(p, 3));
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(fail(TdcrStatus::InvalidArgument, format!("{name} is not finite")))
    }
}

unsafe fn optional_point(p: *const f64, name: &str) -> Result<Option<Vector3<f64>>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        point_arg(p, name).map(Some)
    }
}

fn boxed<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    let out = unsafe { get_mut(out, "out")? };
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn arr3(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn arr12(v: &nalgebra::SVector<f64, ACTUATORS>) -> [f64; TDCR_ACTUATORS] {
    let mut a = [0.0; TDCR_ACTUATORS];
    a.copy_from_slice(v.as_slice());
    a
}

/// Message for the last failed call on this thread, or NULL. Valid until the
/// next call into the library on this thread.
#[no_mangle]
pub extern "C" fn tdcr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tdcr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a scenario config from a TOML file. Relative mesh paths resolve
/// against the file's directory.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tdcr_config_load(path: *const c_char, out: *mut *mut TdcrConfig) -> TdcrStatus {
    guard(|| {
        let cfg = ScenarioConfig::load(str_arg(path, "path")?)?;
        boxed(out, TdcrConfig { inner: cfg })
    })
}

/// Parses a scenario config from TOML text. Pass an empty string for the
/// defaults.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tdcr_config_from_toml(toml: *const c_char, out: *mut *mut TdcrConfig) -> TdcrStatus {
    guard(|| {
        let cfg = ScenarioConfig::from_toml(str_arg(toml, "toml")?)?;
        cfg.validate()?;
        boxed(out, TdcrConfig { inner: cfg })
    })
}

/// # Safety
/// `config` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn tdcr_config_free(config: *mut TdcrConfig) {
    if !config.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(config))));
    }
}

/// Number of spacer disks, i.e. points in a shape.
///
/// # Safety
/// `config` must be valid and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tdcr_config_disk_count(config: *const TdcrConfig, out: *mut usize) -> TdcrStatus {
    guard(|| {
        let cfg = get(config, "config")?;
        *get_mut(out, "out")? = cfg.inner.geometry.total_disks();
        Ok(())
    })
}

/// Control period in seconds.
///
/// # Safety
/// `config` must be valid and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tdcr_config_dt(config: *const TdcrConfig, out: *mut f64) -> TdcrStatus {
    guard(|| {
        *get_mut(out, "out")? = get(config, "config")?.inner.dt();
        Ok(())
    })
}

/// Initial actuator state of the scenario.
///
/// # Safety
/// `config` must be valid and `out` must hold 12 doubles.
#[no_mangle]
pub unsafe extern "C" fn tdcr_config_initial_state(config: *const TdcrConfig, out: *mut f64) -> TdcrStatus {
    guard(|| {
        let x = get(config, "config")?.inner.initial_state()?;
        get(out, "out")?;
        std::slice::from_raw_parts_mut(out, ACTUATORS).copy_from_slice(x.0.as_slice());
        Ok(())
    })
}

/// Disk positions for an actuator state, from the base, as xyz triples.
/// `capacity` is in points; on success or BufferTooSmall `count` receives the
/// number of points.
///
/// # Safety
/// `state` must hold 12 doubles, `points` must hold `3 * capacity` doubles
/// (may be NULL when `capacity` is 0) and `count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tdcr_forward_kinematics(
    config: *const TdcrConfig,
    state: *const f64,
    points: *mut f64,
    capacity: usize,
    count: *mut usize,
) -> TdcrStatus {
    guard(|| {
        let cfg = get(config, "config")?;
        get(state, "state")?;
        let count = get_mut(count, "count")?;
        let x = ActuatorState::from_slice(std::slice::from_raw_parts(state, ACTUATORS))?;
        let shape = forward_kinematics(&x, &cfg.inner.geometry)?;
        *count = shape.len();
        if capacity < shape.len() {
            return Err(fail(
                TdcrStatus::BufferTooSmall,
                format!("need {} points, have room for {capacity}", shape.len()),
            ));
        }
        get(points, "points")?;
        std::slice::from_raw_parts_mut(points, 3 * shape.len()).copy_from_slice(&shape.flat());
        Ok(())
    })
}

/// Loads a closed triangle mesh (OBJ) as a safe zone.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tdcr_zone_load(path: *const c_char, out: *mut *mut TdcrZone) -> TdcrStatus {
    guard(|| {
        let zone = SafeZone::load(str_arg(path, "path")?)?;
        boxed(out, TdcrZone { inner: Arc::new(zone) })
    })
}

/// Builds a safe zone from `vertex_count` xyz triples and `triangle_count`
/// index triples, counter-clockwise seen from outside.
///
/// # Safety
/// The arrays must hold `3 * vertex_count` doubles and `3 * triangle_count`
/// indices; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tdcr_zone_from_mesh(
    vertices: *const f64,
    vertex_count: usize,
    triangles: *const u32,
    triangle_count: usize,
    out: *mut *mut TdcrZone,
) -> TdcrStatus {
    guard(|| {
        get(vertices, "vertices")?;
        get(triangles, "triangles")?;
        let v = std::slice::from_raw_parts(vertices, 3 * vertex_count)
            .chunks_exact(3)
            .map(Vector3::from_column_slice)
            .collect();
        let t = std::slice::from_raw_parts(triangles, 3 * triangle_count)
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        boxed(out, TdcrZone { inner: Arc::new(SafeZone::new(v, t)?) })
    })
}

/// # Safety
/// `zone` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn tdcr_zone_free(zone: *mut TdcrZone) {
    if !zone.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(zone))));
    }
}

/// Signed distance from `point` to the zone boundary.
///
/// # Safety
/// `point` must hold 3 doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tdcr_zone_distance(
    zone: *const TdcrZone,
    point: *const f64,
    out: *mut TdcrDistance,
) -> TdcrStatus {
    guard(|| {
        let zone = get(zone, "zone")?;
        let p = point_arg(point, "point")?;
        let r = zone.inner.signed_distance(&p);
        *get_mut(out, "out")? = TdcrDistance {
            distance: r.distance,
            gradient: arr3(&r.gradient),
            closest: arr3(&r.closest_point),
        };
        Ok(())
    })
}

/// Model predictive controller for a config. `zone` may be NULL for an
/// unconstrained controller; the handle keeps its own reference to it.
///
/// # Safety
/// `config` must be valid, `zone` valid or NULL and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tdcr_mpc_new(
    config: *const TdcrConfig,
    zone: *const TdcrZone,
    out: *mut *mut TdcrMpc,
) -> TdcrStatus {
    guard(|| {
        let cfg = &get(config, "config")?.inner;
        let zone = zone.as_ref().map(|z| z.inner.clone());
        let mpc = MpcController::new(cfg.mpc_params()?, cfg.geometry.clone(), zone)?
            .with_initial_state(cfg.initial_state()?);
        boxed(out, TdcrMpc { inner: mpc })
    })
}

/// # Safety
/// `mpc` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn tdcr_mpc_free(mpc: *mut TdcrMpc) {
    if !mpc.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(mpc))));
    }
}

/// Solves one horizon towards `target` (NULL for none) and advances the
/// nominal state. Returns Infeasible if the nominal state violates the zone.
///
/// # Safety
/// `mpc` must be valid, `target` NULL or 3 doubles, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tdcr_mpc_step(mpc: *mut TdcrMpc, target: *const f64, out: *mut TdcrMpcStep) -> TdcrStatus {
    guard(|| {
        let mpc = get_mut(mpc, "mpc")?;
        let target = optional_point(target, "target")?;
        let out = get_mut(out, "out")?;
        let sol = mpc.inner.step(target.as_ref())?;
        *out = TdcrMpcStep {
            input: arr12(&sol.first_input()),
            nominal_state: arr12(&sol.states[0].0),
            status: sol.status.into(),
            iterations: sol.iterations as u32,
            cost: sol.cost,
            max_violation: sol.max_violation,
        };
        Ok(())
    })
}

/// Drops the warm start and returns the nominal state to the initial state.
///
/// # Safety
/// `mpc` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tdcr_mpc_reset(mpc: *mut TdcrMpc) -> TdcrStatus {
    guard(|| {
        get_mut(mpc, "mpc")?.inner.reset();
        Ok(())
    })
}

/// Simulated robot under the config's controller, with the config's
/// disturbances and safe zone.
///
/// # Safety
/// `config` must be valid and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tdcr_sim_new(config: *const TdcrConfig, out: *mut *mut TdcrSimulation) -> TdcrStatus {
    guard(|| {
        let cfg = &get(config, "config")?.inner;
        let sim = ClosedLoop::new(cfg, cfg.load_zone()?)?;
        boxed(out, TdcrSimulation { inner: sim })
    })
}

/// # Safety
/// `sim` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn tdcr_sim_free(sim: *mut TdcrSimulation) {
    if !sim.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(sim))));
    }
}

/// Runs one control tick towards `target` (NULL holds position). A solver
/// fault is reported in `out.faulted` with zero input applied; the call still
/// returns Ok.
///
/// # Safety
/// `sim` must be valid, `target` NULL or 3 doubles, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tdcr_sim_step(sim: *mut TdcrSimulation, target: *const f64, out: *mut TdcrTick) -> TdcrStatus {
    guard(|| {
        let sim = get_mut(sim, "sim")?;
        let target = optional_point(target, "target")?;
        let out = get_mut(out, "out")?;
        let tick = sim.inner.step(target.as_ref(), 0)?;
        let r = &tick.record;
        *out = TdcrTick {
            tick: r.tick as u64,
            time: r.t,
            input: arr12(&r.u),
            end_effector_measured: arr3(&tick.measured.end_effector()),
            end_effector_nominal: arr3(&tick.nominal.end_effector()),
            error_measured: r.e_ee_real,
            error_nominal: r.e_ee_nom,
            clearance_measured: r.min_clearance_real,
            clearance_nominal: r.min_clearance_nom,
            status: r.status.into(),
            iterations: r.iterations as u32,
            solve_seconds: tick.solve_time,
            faulted: tick.fault.is_some() as u8,
        };
        Ok(())
    })
}

/// True plant state after the last tick.
///
/// # Safety
/// `sim` must be valid and `out` must hold 12 doubles.
#[no_mangle]
pub unsafe extern "C" fn tdcr_sim_state(sim: *const TdcrSimulation, out: *mut f64) -> TdcrStatus {
    guard(|| {
        let sim = get(sim, "sim")?;
        get(out, "out")?;
        std::slice::from_raw_parts_mut(out, ACTUATORS).copy_from_slice(sim.inner.plant().state().0.as_slice());
        Ok(())
    })
}
