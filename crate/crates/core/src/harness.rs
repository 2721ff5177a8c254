//! Closed-loop scenario runner: measure, control, actuate, record.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::Vector3;
use serde::Serialize;

use crate::dls::dls_step;
use crate::error::{Error, Result};
use crate::kinematics::{forward_kinematics, ActuatorVector, RobotShape, ACTUATORS};
use crate::local::local_control;
use crate::mpc::{MpcController, MpcParams, SolverStatus};
use crate::plant::Plant;
use crate::scenario::{ControllerKind, MeasurementMode, ScenarioConfig};
use crate::sdf::SafeZone;

/// One control tick.
#[derive(Debug, Clone, PartialEq)]
pub struct TickRecord {
    pub tick: usize,
    pub t: f64,
    /// Index of the active waypoint.
    pub waypoint: usize,
    /// `None` while no target is active; the errors are then NaN.
    pub target: Option<Vector3<f64>>,
    /// Measured end effector to target (mm).
    pub e_ee_real: f64,
    /// Nominal end effector to target (mm).
    pub e_ee_nom: f64,
    /// Nominal to measured end effector (mm).
    pub e_ee_local: f64,
    /// Mean nominal-to-measured distance over the body disks (mm).
    pub e_body_local: f64,
    pub u_mpc: ActuatorVector,
    pub u_loc: ActuatorVector,
    pub u: ActuatorVector,
    /// `min_i d(p_i) - c_d` on the measured shape (mm).
    pub min_clearance_real: f64,
    /// `min_i d(p_i) - c_d` over every predicted nominal shape (mm).
    pub min_clearance_nom: f64,
    pub status: SolverStatus,
    pub iterations: usize,
    pub active_constraints: usize,
    /// DLS collision cost at the measured shape.
    pub collision_cost: f64,
    /// Uniform factor the DLS input was scaled by to fit the box.
    pub input_scale: f64,
    pub clamp_events: u64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TickRecord {
    pub fn header() -> String {
        let mut h = String::from(
            "tick,t,waypoint,target_x,target_y,target_z,e_ee_real,e_ee_nom,e_ee_local,e_body_local,\
             u_mpc_norm,u_loc_norm,u_norm,min_clearance_real,min_clearance_nom,status,iterations,\
             active_constraints,collision_cost,input_scale,clamp_events",
        );
        for name in ["u_mpc", "u_loc", "u"] {
            for i in 0..ACTUATORS {
                let _ = write!(h, ",{name}_{i}");
            }
        }
        h
    }

    pub fn csv_row(&self) -> String {
        let mut r = format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.tick,
            self.t,
            self.waypoint,
            opt(self.target.map(|t| t.x)),
            opt(self.target.map(|t| t.y)),
            opt(self.target.map(|t| t.z)),
            self.e_ee_real,
            self.e_ee_nom,
            self.e_ee_local,
            self.e_body_local,
            self.u_mpc.norm(),
            self.u_loc.norm(),
            self.u.norm(),
            self.min_clearance_real,
            self.min_clearance_nom,
            self.status.as_str(),
            self.iterations,
            self.active_constraints,
            self.collision_cost,
            self.input_scale,
            self.clamp_events,
        );
        for v in [&self.u_mpc, &self.u_loc, &self.u] {
            for x in v.iter() {
                let _ = write!(r, ",{x}");
            }
        }
        r
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct WaypointOutcome {
    pub index: usize,
    pub target: [f64; 3],
    /// Tick at which the dwell completed.
    pub reached_tick: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingStats {
    pub samples: usize,
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

impl TimingStats {
    pub fn from_seconds(times: &[f64]) -> Self {
        if times.is_empty() {
            return Self {
                samples: 0,
                mean_ms: 0.0,
                p95_ms: 0.0,
                max_ms: 0.0,
            };
        }
        let mut ms: Vec<f64> = times.iter().map(|t| t * 1e3).collect();
        ms.sort_by(f64::total_cmp);
        let idx = ((0.95 * ms.len() as f64).ceil() as usize).clamp(1, ms.len()) - 1;
        Self {
            samples: ms.len(),
            mean_ms: ms.iter().sum::<f64>() / ms.len() as f64,
            p95_ms: ms[idx],
            max_ms: ms[ms.len() - 1],
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub name: String,
    pub controller: String,
    pub seed: u64,
    pub ticks: usize,
    pub rate: f64,
    pub waypoints: Vec<WaypointOutcome>,
    pub all_waypoints_reached: bool,
    /// Time from which the measured error stays inside the last waypoint's
    /// tolerance until the end of the run.
    pub settle_time: Option<f64>,
    /// Ticks with a measured disk closer than the margin.
    pub margin_violation_ticks: usize,
    /// Ticks with a measured disk outside the zone.
    pub zone_violation_ticks: usize,
    /// Ticks whose nominal prediction violates the margin by more than tol_c.
    pub nominal_violation_ticks: usize,
    pub min_clearance_real: f64,
    pub min_clearance_nom: f64,
    pub solver_faults: usize,
    pub max_iter_ticks: usize,
    pub clamp_events: u64,
    pub input_scaled_ticks: usize,
    pub solve_time: TimingStats,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub config: ScenarioConfig,
    pub records: Vec<TickRecord>,
    /// Per-tick controller time (s); kept out of the metrics file.
    pub solve_times: Vec<f64>,
    /// Measured and nominal shape per tick when `dump_shapes` is set.
    pub shapes: Vec<(RobotShape, RobotShape)>,
    pub summary: RunSummary,
}

fn min_clearance(shape: &RobotShape, zone: Option<&SafeZone>, margin: f64) -> f64 {
    match zone {
        Some(z) => shape
            .points
            .iter()
            .map(|p| z.signed_distance(p).distance - margin)
            .fold(f64::INFINITY, f64::min),
        None => f64::INFINITY,
    }
}

fn mean_body_distance(nominal: &RobotShape, measured: &RobotShape) -> f64 {
    let body = nominal.len() - 1;
    nominal.points[..body]
        .iter()
        .zip(&measured.points[..body])
        .map(|(a, b)| (a - b).norm())
        .sum::<f64>()
        / body as f64
}

enum Controller {
    Mpc(Box<MpcController>),
    Dls,
}

/// What one control tick produced.
#[derive(Debug, Clone)]
pub struct TickOutput {
    pub record: TickRecord,
    /// Measurement the controller acted on.
    pub measured: RobotShape,
    /// Nominal shape at the start of the tick.
    pub nominal: RobotShape,
    /// Controller wall time (s).
    pub solve_time: f64,
    /// Reason the solver gave up, for ticks recorded as infeasible.
    pub fault: Option<String>,
}

/// Plant, controller and local feedback wired as measure, control, actuate.
pub struct ClosedLoop {
    cfg: ScenarioConfig,
    zone: Option<Arc<SafeZone>>,
    params: MpcParams,
    plant: Plant,
    controller: Controller,
    y: RobotShape,
    tick: usize,
    latch_faults: bool,
    faulted: bool,
}

impl ClosedLoop {
    pub fn new(cfg: &ScenarioConfig, zone: Option<Arc<SafeZone>>) -> Result<Self> {
        cfg.validate()?;
        let geom = cfg.geometry.clone();
        let params = cfg.mpc_params()?;
        let x0 = cfg.initial_state()?;
        let plant = Plant::new(x0, cfg.disturbance, geom.clone())?;
        let controller = match cfg.controller {
            ControllerKind::Mpc => Controller::Mpc(Box::new(
                MpcController::new(params.clone(), geom, zone.clone())?.with_initial_state(x0),
            )),
            ControllerKind::Dls => Controller::Dls,
        };
        let y = plant.measure()?;
        Ok(Self {
            cfg: cfg.clone(),
            zone,
            params,
            plant,
            controller,
            y,
            tick: 0,
            latch_faults: false,
            faulted: false,
        })
    }

    /// After a solver fault, keep applying zero input until [`clear_fault`](Self::clear_fault).
    pub fn latch_faults(mut self, latch: bool) -> Self {
        self.latch_faults = latch;
        self
    }

    pub fn is_faulted(&self) -> bool {
        self.faulted
    }

    pub fn clear_fault(&mut self) {
        self.faulted = false;
    }

    pub fn tick_index(&self) -> usize {
        self.tick
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 * self.cfg.dt()
    }

    pub fn plant(&self) -> &Plant {
        &self.plant
    }

    pub fn zone(&self) -> Option<&Arc<SafeZone>> {
        self.zone.as_ref()
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    /// Latest measurement.
    pub fn measurement(&self) -> &RobotShape {
        &self.y
    }

    /// Runs one tick towards `target` (`None` drops the end-effector term)
    /// and advances the plant.
    pub fn step(&mut self, target: Option<&Vector3<f64>>, waypoint: usize) -> Result<TickOutput> {
        let geom = &self.cfg.geometry;
        let dt = self.cfg.dt();
        let margin = self.cfg.safety_margin;
        let zone_ref = self.zone.as_deref();
        let y = self.y.clone();
        let measured = match self.cfg.measurement {
            MeasurementMode::Full => y.clone(),
            MeasurementMode::EeOnly => RobotShape::new(vec![y.end_effector()]),
        };

        let started = Instant::now();
        let mut status = SolverStatus::Optimal;
        let (mut iterations, mut active) = (0, 0);
        let (mut collision_cost, mut input_scale) = (0.0, 1.0);
        let mut fault = None;
        let (u_mpc, u_loc, nominal, min_nom) = match &mut self.controller {
            Controller::Mpc(mpc) if self.faulted => {
                status = SolverStatus::Infeasible;
                let nominal = forward_kinematics(&mpc.nominal_state(), geom)?;
                let min_nom = min_clearance(&nominal, zone_ref, margin);
                (ActuatorVector::zeros(), ActuatorVector::zeros(), nominal, min_nom)
            }
            Controller::Mpc(mpc) => match mpc.step(target) {
                Ok(sol) => {
                    let nominal = sol.outputs[0].clone();
                    let u_loc = local_control(&nominal, &measured, &sol.states[0], &self.cfg.local, geom)?;
                    status = sol.status;
                    iterations = sol.iterations;
                    active = sol.active_constraints;
                    let min_nom = sol
                        .outputs
                        .iter()
                        .map(|s| min_clearance(s, zone_ref, margin))
                        .fold(f64::INFINITY, f64::min);
                    (sol.inputs[0], u_loc, nominal, min_nom)
                }
                Err(Error::Infeasible(reason)) => {
                    log::error!("mpc fault at tick {}: {reason}", self.tick);
                    status = SolverStatus::Infeasible;
                    fault = Some(reason);
                    self.faulted = self.latch_faults;
                    let nominal = forward_kinematics(&mpc.nominal_state(), geom)?;
                    let min_nom = min_clearance(&nominal, zone_ref, margin);
                    (ActuatorVector::zeros(), ActuatorVector::zeros(), nominal, min_nom)
                }
                Err(e) => return Err(e),
            },
            Controller::Dls => {
                let goal = target.copied().unwrap_or_else(|| y.end_effector());
                let out = dls_step(
                    &y,
                    self.plant.state(),
                    &goal,
                    zone_ref,
                    &self.cfg.dls_params(),
                    geom,
                    dt,
                    &self.params.input_min,
                    &self.params.input_max,
                )?;
                collision_cost = out.collision_cost;
                input_scale = out.scale;
                let nominal = forward_kinematics(self.plant.state(), geom)?;
                let min_nom = min_clearance(&nominal, zone_ref, margin);
                (out.input, ActuatorVector::zeros(), nominal, min_nom)
            }
        };
        let solve_time = started.elapsed().as_secs_f64();
        let u = u_mpc + u_loc;

        let error = |p: &Vector3<f64>| target.map_or(f64::NAN, |t| (p - t).norm());
        let record = TickRecord {
            tick: self.tick,
            t: self.time(),
            waypoint,
            target: target.copied(),
            e_ee_real: error(&y.end_effector()),
            e_ee_nom: error(&nominal.end_effector()),
            e_ee_local: (nominal.end_effector() - y.end_effector()).norm(),
            e_body_local: mean_body_distance(&nominal, &y),
            u_mpc,
            u_loc,
            u,
            min_clearance_real: min_clearance(&y, zone_ref, margin),
            min_clearance_nom: min_nom,
            status,
            iterations,
            active_constraints: active,
            collision_cost,
            input_scale,
            clamp_events: self.plant.clamp_events(),
        };
        self.y = self.plant.step(&u, dt)?;
        self.tick += 1;
        Ok(TickOutput {
            record,
            measured: y,
            nominal,
            solve_time,
            fault,
        })
    }
}

/// Runs the closed loop without writing anything.
pub fn simulate(cfg: &ScenarioConfig) -> Result<RunResult> {
    let zone = cfg.load_zone()?;
    simulate_with_zone(cfg, zone)
}

pub fn simulate_with_zone(cfg: &ScenarioConfig, zone: Option<Arc<SafeZone>>) -> Result<RunResult> {
    let mut cl = ClosedLoop::new(cfg, zone)?;
    let origin = forward_kinematics(&cfg.initial_state()?, &cfg.geometry)?.end_effector();
    let targets = cfg.targets(&origin);

    let mut waypoint = 0usize;
    let mut streak = 0usize;
    let mut outcomes: Vec<WaypointOutcome> = targets
        .iter()
        .enumerate()
        .map(|(index, t)| WaypointOutcome {
            index,
            target: [t.x, t.y, t.z],
            reached_tick: None,
        })
        .collect();

    let mut records = Vec::with_capacity(cfg.ticks());
    let mut solve_times = Vec::with_capacity(cfg.ticks());
    let mut shapes = Vec::new();
    for tick in 0..cfg.ticks() {
        let target = targets.get(waypoint).copied().unwrap_or(origin);
        let out = cl.step(Some(&target), waypoint)?;
        if let (0, Some(reason)) = (tick, &out.fault) {
            return Err(Error::Infeasible(format!("at t = 0: {reason}")));
        }
        solve_times.push(out.solve_time);
        let e_ee_real = out.record.e_ee_real;
        if cfg.dump_shapes {
            shapes.push((out.measured, out.nominal));
        }
        records.push(out.record);

        // waypoint bookkeeping on the measured error
        if let Some(wp) = cfg.waypoints.get(waypoint) {
            if e_ee_real < wp.tolerance {
                streak += 1;
                if streak >= wp.dwell && outcomes[waypoint].reached_tick.is_none() {
                    outcomes[waypoint].reached_tick = Some(tick);
                    if waypoint + 1 < targets.len() {
                        waypoint += 1;
                        streak = 0;
                    }
                }
            } else {
                streak = 0;
            }
        }
    }

    let summary = summarise(cfg, &records, &solve_times, outcomes, cl.plant().clamp_events());
    Ok(RunResult {
        config: cfg.clone(),
        records,
        solve_times,
        shapes,
        summary,
    })
}

fn summarise(
    cfg: &ScenarioConfig,
    records: &[TickRecord],
    solve_times: &[f64],
    waypoints: Vec<WaypointOutcome>,
    clamp_events: u64,
) -> RunSummary {
    let tol = cfg.waypoints.last().map_or(2.0, |w| w.tolerance);
    let last_wp = cfg.waypoints.len().saturating_sub(1);
    let mut settle = None;
    for r in records.iter().rev() {
        if r.waypoint != last_wp || r.e_ee_real >= tol {
            break;
        }
        settle = Some(r.t);
    }
    let tol_c = cfg.mpc.constraint_tol;
    RunSummary {
        name: cfg.name.clone(),
        controller: cfg.controller.to_string(),
        seed: cfg.disturbance.seed,
        ticks: records.len(),
        rate: cfg.rate,
        all_waypoints_reached: waypoints.iter().all(|w| w.reached_tick.is_some()),
        waypoints,
        settle_time: settle,
        margin_violation_ticks: records.iter().filter(|r| r.min_clearance_real < -tol_c).count(),
        zone_violation_ticks: records
            .iter()
            .filter(|r| r.min_clearance_real + cfg.safety_margin < 0.0)
            .count(),
        nominal_violation_ticks: records.iter().filter(|r| r.min_clearance_nom < -tol_c).count(),
        min_clearance_real: records.iter().map(|r| r.min_clearance_real).fold(f64::INFINITY, f64::min),
        min_clearance_nom: records.iter().map(|r| r.min_clearance_nom).fold(f64::INFINITY, f64::min),
        solver_faults: records.iter().filter(|r| r.status == SolverStatus::Infeasible).count(),
        max_iter_ticks: records.iter().filter(|r| r.status == SolverStatus::MaxIter).count(),
        clamp_events,
        input_scaled_ticks: records.iter().filter(|r| r.input_scale < 1.0).count(),
        solve_time: TimingStats::from_seconds(solve_times),
    }
}

pub fn metrics_csv(records: &[TickRecord]) -> String {
    let mut out = TickRecord::header();
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Writes `metrics.csv`, `summary.json` and optionally `shapes.jsonl`.
pub fn write_run(result: &RunResult, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("metrics.csv"), metrics_csv(&result.records))?;
    let summary = serde_json::to_string_pretty(&result.summary).map_err(|e| Error::InvalidInput(e.to_string()))?;
    fs::write(out.join("summary.json"), summary + "\n")?;
    fs::write(out.join("config.toml"), result.config.to_toml())?;
    if !result.shapes.is_empty() {
        let mut f = std::io::BufWriter::new(fs::File::create(out.join("shapes.jsonl"))?);
        for (tick, (measured, nominal)) in result.shapes.iter().enumerate() {
            let line = serde_json::json!({
                "tick": tick,
                "measured": measured.flat(),
                "nominal": nominal.flat(),
            });
            writeln!(f, "{line}")?;
        }
    }
    Ok(())
}

pub fn run_scenario(cfg: &ScenarioConfig, out: &Path) -> Result<RunResult> {
    let result = simulate(cfg)?;
    write_run(&result, out)?;
    Ok(result)
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    pub a: RunSummary,
    pub b: RunSummary,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    pub fn table(&self) -> String {
        let mut s = format!(
            "| metric | {} ({}) | {} ({}) |\n|---|---|---|\n",
            self.a.name, self.a.controller, self.b.name, self.b.controller
        );
        for r in &self.rows {
            let _ = writeln!(s, "| {} | {:.4} | {:.4} |", r.metric, r.a, r.b);
        }
        s
    }
}

fn tail_mean(records: &[TickRecord], f: impl Fn(&TickRecord) -> f64) -> f64 {
    let n = (records.len() / 4).max(1).min(records.len());
    records[records.len() - n..].iter().map(f).sum::<f64>() / n as f64
}

/// Runs both configs on the same disturbance realisation (B inherits A's
/// seed) and tabulates the headline metrics.
pub fn run_comparison(a: &ScenarioConfig, b: &ScenarioConfig, out: Option<&Path>) -> Result<ComparisonReport> {
    let mut b = b.clone();
    b.disturbance.seed = a.disturbance.seed;
    let ra = simulate(a)?;
    let rb = simulate(&b)?;
    let nan = f64::NAN;
    let row = |metric: &str, a: f64, b: f64| ComparisonRow {
        metric: metric.into(),
        a,
        b,
    };
    let rows = vec![
        row("settle_time_s", ra.summary.settle_time.unwrap_or(nan), rb.summary.settle_time.unwrap_or(nan)),
        row(
            "final_e_ee_real_mm",
            tail_mean(&ra.records, |r| r.e_ee_real),
            tail_mean(&rb.records, |r| r.e_ee_real),
        ),
        row(
            "margin_violation_ticks",
            ra.summary.margin_violation_ticks as f64,
            rb.summary.margin_violation_ticks as f64,
        ),
        row(
            "zone_violation_ticks",
            ra.summary.zone_violation_ticks as f64,
            rb.summary.zone_violation_ticks as f64,
        ),
        row(
            "nominal_violation_ticks",
            ra.summary.nominal_violation_ticks as f64,
            rb.summary.nominal_violation_ticks as f64,
        ),
        row("min_clearance_real_mm", ra.summary.min_clearance_real, rb.summary.min_clearance_real),
        row("mean_solve_ms", ra.summary.solve_time.mean_ms, rb.summary.solve_time.mean_ms),
    ];
    let report = ComparisonReport {
        a: ra.summary.clone(),
        b: rb.summary.clone(),
        rows,
    };
    if let Some(out) = out {
        write_run(&ra, &out.join("a"))?;
        write_run(&rb, &out.join("b"))?;
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::InvalidInput(e.to_string()))?;
        fs::write(out.join("report.json"), json + "\n")?;
        fs::write(out.join("report.md"), report.table())?;
    }
    Ok(report)
}

/// Solve-time statistics over `repetitions` full runs of `cfg`.
pub fn benchmark_solver(cfg: &ScenarioConfig, repetitions: usize) -> Result<TimingStats> {
    let zone = cfg.load_zone()?;
    let mut times = Vec::new();
    for _ in 0..repetitions.max(1) {
        let r = simulate_with_zone(cfg, zone.clone())?;
        times.extend(r.solve_times);
    }
    Ok(TimingStats::from_seconds(&times))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::DisturbanceSpec;
    use crate::scenario::Waypoint;

    #[test]
    fn target_at_start_is_converged_immediately() {
        let cfg = ScenarioConfig {
            duration: 1.0,
            disturbance: DisturbanceSpec::none(),
            waypoints: vec![Waypoint {
                position: [0.0, 0.0, 0.0],
                relative: true,
                tolerance: 2.0,
                dwell: 15,
            }],
            mpc: crate::scenario::MpcConfig {
                s: crate::scenario::Weight::Scalar(0.0),
                ..Default::default()
            },
            ..ScenarioConfig::default()
        };
        let r = simulate(&cfg).unwrap();
        assert_eq!(r.summary.waypoints[0].reached_tick, Some(14));
        assert_eq!(r.summary.settle_time, Some(0.0));
        for rec in &r.records {
            assert!(rec.e_ee_real < 1e-6 && rec.e_body_local < 1e-6);
            assert_eq!(rec.u, rec.u_mpc + rec.u_loc);
        }
    }

    #[test]
    fn timing_stats() {
        let s = TimingStats::from_seconds(&[0.001, 0.002, 0.003, 0.004]);
        assert!((s.mean_ms - 2.5).abs() < 1e-12);
        assert_eq!(s.p95_ms, 4.0);
        assert_eq!(s.max_ms, 4.0);
    }
}
