//! Live teleoperation service.
//!
//! The control loop runs on its own thread and owns the plant and the
//! controllers. After every tick it hands a serialised snapshot to the
//! network side through a broadcast channel (per-tick stream) and a watch
//! channel (latest value for late subscribers). Commands travel the other
//! way over a queue that the loop drains at the start of each tick, each
//! with a one-shot reply. The loop never waits on a network consumer; a
//! subscriber that falls more than [`STREAM_BUFFER`] snapshots behind is
//! disconnected.
//!
//! Routes (all JSON, every message carries `"v": 1`):
//!
//! | route | |
//! |---|---|
//! | `GET /api/v1/stream` | websocket; snapshots out, commands in |
//! | `GET /api/v1/state` | latest snapshot |
//! | `POST /api/v1/target` | `{"target": [x, y, z]}` or `{"target": null}` |
//! | `POST /api/v1/pause`, `/resume`, `/reset` | loop control |
//! | `GET /api/v1/mesh` | safe-zone vertices and triangles |
//! | `GET /api/v1/config` | scenario config and derived constants |
//!
//! The message schemas are documented in `docs/teleop-protocol.md`.

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::{Duration, Instant};

use axum::extract::ws::{CloseFrame, Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures_util::{SinkExt, StreamExt};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::{broadcast, oneshot, watch};

use crate::error::{Error, Result};
use crate::harness::{ClosedLoop, TickOutput, TickRecord};
use crate::scenario::ScenarioConfig;
use crate::sdf::SafeZone;

pub const PROTOCOL_VERSION: u32 = 1;

/// Snapshots a subscriber may fall behind before it is dropped.
pub const STREAM_BUFFER: usize = 256;

const COMMAND_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoopStatus {
    Running,
    Paused,
    Fault,
}

/// One published state message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub v: u32,
    #[serde(rename = "type")]
    pub kind: String,
    /// Publication counter; strictly increasing.
    pub seq: u64,
    /// Control tick; never decreases, also across resets.
    pub tick: u64,
    pub t: f64,
    pub status: LoopStatus,
    pub target: Option<[f64; 3]>,
    /// Tick from which the active target has been applied.
    pub target_tick: Option<u64>,
    pub target_inside: Option<bool>,
    /// Measured disk positions, x y z per disk from the base outwards (mm).
    pub measured: Vec<f64>,
    /// Nominal disk positions, same layout.
    pub nominal: Vec<f64>,
    pub e_ee_real: Option<f64>,
    pub e_ee_nom: Option<f64>,
    pub e_ee_local: f64,
    pub e_body_local: f64,
    /// Smallest signed distance of a measured disk to the zone surface (mm).
    pub min_distance_real: Option<f64>,
    /// Smallest signed distance over the predicted nominal shapes (mm).
    pub min_distance_nom: Option<f64>,
    pub safety_margin: f64,
    pub solver_status: String,
    pub iterations: usize,
    pub input: Vec<f64>,
    pub mesh_id: Option<String>,
    pub fault: Option<String>,
    pub resets: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetAck {
    pub v: u32,
    #[serde(rename = "type")]
    pub kind: String,
    pub accepted: bool,
    pub target: Option<[f64; 3]>,
    /// Advisory only; exterior targets are accepted.
    pub inside: Option<bool>,
    /// First tick that uses the target.
    pub applies_at_tick: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandAck {
    pub v: u32,
    #[serde(rename = "type")]
    pub kind: String,
    pub command: String,
    pub accepted: bool,
    pub status: LoopStatus,
    pub tick: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub message: Option<String>,
}

/// Messages a websocket client may send.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum ClientCommand {
    SetTarget {
        v: u32,
        target: Option<[f64; 3]>,
    },
    Pause {
        v: u32,
    },
    Resume {
        v: u32,
    },
    Reset {
        v: u32,
    },
}

impl ClientCommand {
    fn version(&self) -> u32 {
        match self {
            Self::SetTarget { v, .. } | Self::Pause { v } | Self::Resume { v } | Self::Reset { v } => *v,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TargetRequest {
    #[serde(default = "default_version")]
    v: u32,
    target: Option<[f64; 3]>,
}

fn default_version() -> u32 {
    PROTOCOL_VERSION
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LoopCommand {
    Pause,
    Resume,
    Reset,
}

impl LoopCommand {
    fn name(self) -> &'static str {
        match self {
            Self::Pause => "pause",
            Self::Resume => "resume",
            Self::Reset => "reset",
        }
    }
}

enum Command {
    SetTarget(Option<Vector3<f64>>, oneshot::Sender<TargetAck>),
    Control(LoopCommand, oneshot::Sender<CommandAck>),
}

#[derive(Debug, Clone)]
pub struct TeleopOptions {
    /// Simulated seconds per wall-clock second.
    pub time_scale: f64,
    /// Directory for `metrics.csv` and `events.jsonl`; nothing is written
    /// when unset.
    pub out: Option<PathBuf>,
}

impl Default for TeleopOptions {
    fn default() -> Self {
        Self {
            time_scale: 1.0,
            out: None,
        }
    }
}

/// Loop period statistics since start-up.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LoopTiming {
    pub ticks: u64,
    /// Largest lateness of a tick start behind its deadline (s).
    pub max_lateness: f64,
    pub mean_lateness: f64,
}

struct Published {
    seq: u64,
    json: String,
}

struct Shared {
    commands: mpsc::Sender<Command>,
    stream: broadcast::Sender<Arc<Published>>,
    latest: watch::Receiver<Option<Arc<Published>>>,
    mesh: Option<Arc<String>>,
    config: Arc<String>,
    timing: watch::Receiver<LoopTiming>,
}

fn check_teleop_config(cfg: &ScenarioConfig, opts: &TeleopOptions) -> Result<()> {
    cfg.validate()?;
    if !cfg.waypoints.is_empty() {
        return Err(Error::InvalidConfig(
            "teleoperation configs take targets from the operator and must not list waypoints".into(),
        ));
    }
    if !(opts.time_scale > 0.0) || !opts.time_scale.is_finite() {
        return Err(Error::InvalidConfig("time_scale must be positive and finite".into()));
    }
    Ok(())
}

fn mesh_id(cfg: &ScenarioConfig) -> Option<String> {
    cfg.mesh
        .as_ref()
        .and_then(|p| p.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
}

fn mesh_message(cfg: &ScenarioConfig, zone: &SafeZone) -> String {
    let vertices: Vec<f64> = zone.vertices().iter().flat_map(|v| [v.x, v.y, v.z]).collect();
    let triangles: Vec<u32> = zone.triangles().iter().flatten().copied().collect();
    json!({
        "v": PROTOCOL_VERSION,
        "type": "mesh",
        "id": mesh_id(cfg),
        "vertices": vertices,
        "triangles": triangles,
    })
    .to_string()
}

fn config_message(cfg: &ScenarioConfig) -> String {
    json!({
        "v": PROTOCOL_VERSION,
        "type": "config",
        "rate": cfg.rate,
        "dt": cfg.dt(),
        "disks": cfg.geometry.total_disks(),
        "safety_margin": cfg.safety_margin,
        "mesh_id": mesh_id(cfg),
        "config": cfg,
    })
    .to_string()
}

/// Running service; dropping it without [`shutdown`](Self::shutdown) leaves
/// the loop thread running until the process exits.
pub struct TeleopServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    shutdown: Option<oneshot::Sender<()>>,
    server: tokio::task::JoinHandle<std::io::Result<()>>,
    control: Option<thread::JoinHandle<()>>,
}

impl TeleopServer {
    /// Binds `bind`, starts the control loop and serves the routes.
    pub async fn start(cfg: ScenarioConfig, bind: &str, opts: TeleopOptions) -> Result<Self> {
        check_teleop_config(&cfg, &opts)?;
        let zone = cfg.load_zone()?;
        let listener = tokio::net::TcpListener::bind(bind)
            .await
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("cannot bind {bind}: {e}"))))?;
        let addr = listener.local_addr()?;

        let closed_loop = ClosedLoop::new(&cfg, zone.clone())?.latch_faults(true);
        let (cmd_tx, cmd_rx) = mpsc::channel();
        let (stream_tx, _) = broadcast::channel(STREAM_BUFFER);
        let (latest_tx, latest_rx) = watch::channel(None);
        let (timing_tx, timing_rx) = watch::channel(LoopTiming::default());
        let stop = Arc::new(AtomicBool::new(false));

        let shared = Arc::new(Shared {
            commands: cmd_tx,
            stream: stream_tx.clone(),
            latest: latest_rx,
            mesh: zone.as_deref().map(|z| Arc::new(mesh_message(&cfg, z))),
            config: Arc::new(config_message(&cfg)),
            timing: timing_rx,
        });

        let mut control = ControlLoop::new(cfg, zone, closed_loop, &opts)?;
        let loop_stop = stop.clone();
        let handle = thread::Builder::new()
            .name("tdcr-control".into())
            .spawn(move || {
                control.run(cmd_rx, stream_tx, latest_tx, timing_tx, &loop_stop);
            })?;

        let app = router(shared);
        let (shutdown_tx, shutdown_rx) = oneshot::channel::<()>();
        let server = tokio::spawn(async move {
            axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = shutdown_rx.await;
                })
                .await
        });
        log::info!("teleop: serving on http://{addr}/api/v1");
        Ok(Self {
            addr,
            stop,
            shutdown: Some(shutdown_tx),
            server,
            control: Some(handle),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops the loop and the server and waits for both.
    pub async fn shutdown(mut self) -> Result<()> {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(h) = self.control.take() {
            tokio::task::spawn_blocking(move || h.join())
                .await
                .map_err(|e| Error::InvalidInput(format!("control loop join failed: {e}")))?
                .map_err(|_| Error::InvalidInput("control loop panicked".into()))?;
        }
        (&mut self.server)
            .await
            .map_err(|e| Error::InvalidInput(format!("server task failed: {e}")))??;
        Ok(())
    }
}

/// Runs the service until Ctrl-C.
pub fn serve_blocking(cfg: ScenarioConfig, bind: &str) -> Result<()> {
    serve_blocking_with(cfg, bind, TeleopOptions::default())
}

pub fn serve_blocking_with(cfg: ScenarioConfig, bind: &str, opts: TeleopOptions) -> Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async {
        let server = TeleopServer::start(cfg, bind, opts).await?;
        println!("serving on http://{}/api/v1 (Ctrl-C to stop)", server.local_addr());
        tokio::signal::ctrl_c().await?;
        server.shutdown().await
    })
}

fn router(shared: Arc<Shared>) -> Router {
    Router::new()
        .route("/api/v1/stream", get(stream_handler))
        .route("/api/v1/state", get(state_handler))
        .route("/api/v1/target", post(target_handler))
        .route("/api/v1/pause", post(|s| control_handler(s, LoopCommand::Pause)))
        .route("/api/v1/resume", post(|s| control_handler(s, LoopCommand::Resume)))
        .route("/api/v1/reset", post(|s| control_handler(s, LoopCommand::Reset)))
        .route("/api/v1/mesh", get(mesh_handler))
        .route("/api/v1/config", get(config_handler))
        .route("/api/v1/timing", get(timing_handler))
        .with_state(shared)
}

fn error_body(message: impl Into<String>) -> Value {
    json!({ "v": PROTOCOL_VERSION, "type": "error", "message": message.into() })
}

fn json_text(status: StatusCode, body: String) -> Response {
    (status, [(axum::http::header::CONTENT_TYPE, "application/json")], body).into_response()
}

async fn state_handler(State(shared): State<Arc<Shared>>) -> Response {
    let latest = shared.latest.borrow().clone();
    match latest {
        Some(p) => json_text(StatusCode::OK, p.json.clone()),
        None => (StatusCode::SERVICE_UNAVAILABLE, Json(error_body("no tick has run yet"))).into_response(),
    }
}

async fn mesh_handler(State(shared): State<Arc<Shared>>) -> Response {
    match &shared.mesh {
        Some(m) => json_text(StatusCode::OK, m.as_ref().clone()),
        None => (StatusCode::NOT_FOUND, Json(error_body("no safe-zone mesh configured"))).into_response(),
    }
}

async fn config_handler(State(shared): State<Arc<Shared>>) -> Response {
    json_text(StatusCode::OK, shared.config.as_ref().clone())
}

async fn timing_handler(State(shared): State<Arc<Shared>>) -> Response {
    let t = *shared.timing.borrow();
    Json(json!({ "v": PROTOCOL_VERSION, "type": "timing", "timing": t })).into_response()
}

async fn target_handler(State(shared): State<Arc<Shared>>, body: String) -> Response {
    let req: TargetRequest = match serde_json::from_str(&body) {
        Ok(r) => r,
        Err(e) => return (StatusCode::BAD_REQUEST, Json(error_body(e.to_string()))).into_response(),
    };
    if req.v != PROTOCOL_VERSION {
        return (StatusCode::BAD_REQUEST, Json(error_body(format!("unsupported version {}", req.v)))).into_response();
    }
    match set_target(&shared, req.target).await {
        Ok(ack) => Json(ack).into_response(),
        Err((code, msg)) => (code, Json(error_body(msg))).into_response(),
    }
}

async fn control_handler(State(shared): State<Arc<Shared>>, cmd: LoopCommand) -> Response {
    match control(&shared, cmd).await {
        Ok(ack) => Json(ack).into_response(),
        Err((code, msg)) => (code, Json(error_body(msg))).into_response(),
    }
}

async fn set_target(shared: &Shared, target: Option<[f64; 3]>) -> Result<TargetAck, (StatusCode, String)> {
    if let Some(t) = target {
        if t.iter().any(|v| !v.is_finite()) {
            return Err((StatusCode::UNPROCESSABLE_ENTITY, "target must be finite".into()));
        }
    }
    let (tx, rx) = oneshot::channel();
    shared
        .commands
        .send(Command::SetTarget(target.map(Vector3::from), tx))
        .map_err(|_| (StatusCode::SERVICE_UNAVAILABLE, "control loop has stopped".to_string()))?;
    await_reply(rx).await
}

async fn control(shared: &Shared, cmd: LoopCommand) -> Result<CommandAck, (StatusCode, String)> {
    let (tx, rx) = oneshot::channel();
    shared
        .commands
        .send(Command::Control(cmd, tx))
        .map_err(|_| (StatusCode::SERVICE_UNAVAILABLE, "control loop has stopped".to_string()))?;
    await_reply(rx).await
}

async fn await_reply<T>(rx: oneshot::Receiver<T>) -> Result<T, (StatusCode, String)> {
    match tokio::time::timeout(COMMAND_TIMEOUT, rx).await {
        Ok(Ok(reply)) => Ok(reply),
        Ok(Err(_)) => Err((StatusCode::SERVICE_UNAVAILABLE, "control loop has stopped".into())),
        Err(_) => Err((StatusCode::GATEWAY_TIMEOUT, "control loop did not answer".into())),
    }
}

async fn stream_handler(ws: WebSocketUpgrade, State(shared): State<Arc<Shared>>) -> Response {
    ws.on_upgrade(move |socket| stream_session(socket, shared))
}

async fn handle_client_text(shared: &Shared, text: &str) -> String {
    let cmd: ClientCommand = match serde_json::from_str(text) {
        Ok(c) => c,
        Err(e) => return error_body(format!("bad message: {e}")).to_string(),
    };
    if cmd.version() != PROTOCOL_VERSION {
        return error_body(format!("unsupported version {}", cmd.version())).to_string();
    }
    let reply = match cmd {
        ClientCommand::SetTarget { target, .. } => set_target(shared, target).await.map(|a| json!(a)),
        ClientCommand::Pause { .. } => control(shared, LoopCommand::Pause).await.map(|a| json!(a)),
        ClientCommand::Resume { .. } => control(shared, LoopCommand::Resume).await.map(|a| json!(a)),
        ClientCommand::Reset { .. } => control(shared, LoopCommand::Reset).await.map(|a| json!(a)),
    };
    match reply {
        Ok(v) => v.to_string(),
        Err((_, msg)) => error_body(msg).to_string(),
    }
}

async fn stream_session(socket: WebSocket, shared: Arc<Shared>) {
    let (mut sink, mut source) = socket.split();
    let mut updates = shared.stream.subscribe();
    let mut last_seq = 0u64;
    let first = shared.latest.borrow().clone();
    if let Some(p) = first {
        last_seq = p.seq;
        if sink.send(Message::Text(p.json.clone())).await.is_err() {
            return;
        }
    }

    let (reply_tx, mut replies) = tokio::sync::mpsc::channel::<String>(16);
    let reader_shared = shared.clone();
    let reader = async move {
        while let Some(Ok(msg)) = source.next().await {
            match msg {
                Message::Text(text) => {
                    let reply = handle_client_text(&reader_shared, &text).await;
                    if reply_tx.send(reply).await.is_err() {
                        break;
                    }
                }
                Message::Close(_) => break,
                _ => {}
            }
        }
    };
    let writer = async move {
        loop {
            tokio::select! {
                update = updates.recv() => match update {
                    Ok(p) => {
                        if p.seq <= last_seq {
                            continue;
                        }
                        last_seq = p.seq;
                        if sink.send(Message::Text(p.json.clone())).await.is_err() {
                            break;
                        }
                    }
                    Err(broadcast::error::RecvError::Lagged(n)) => {
                        log::warn!("teleop: dropping a subscriber that fell {n} snapshots behind");
                        let _ = sink
                            .send(Message::Close(Some(CloseFrame {
                                code: axum::extract::ws::close_code::POLICY,
                                reason: "subscriber too slow".into(),
                            })))
                            .await;
                        break;
                    }
                    Err(broadcast::error::RecvError::Closed) => {
                        let _ = sink.send(Message::Close(None)).await;
                        break;
                    }
                },
                Some(reply) = replies.recv() => {
                    if sink.send(Message::Text(reply)).await.is_err() {
                        break;
                    }
                }
            }
        }
    };
    tokio::select! {
        _ = reader => {}
        _ = writer => {}
    }
}

/// Loop-thread state.
struct ControlLoop {
    cfg: ScenarioConfig,
    zone: Option<Arc<SafeZone>>,
    closed_loop: ClosedLoop,
    status: LoopStatus,
    target: Option<Vector3<f64>>,
    target_tick: Option<u64>,
    tick: u64,
    seq: u64,
    resets: u64,
    fault: Option<String>,
    last: Option<Snapshot>,
    /// Status announcement waiting for the next publication slot.
    pending: Option<Snapshot>,
    period: Duration,
    metrics: Option<BufWriter<File>>,
    events: Option<BufWriter<File>>,
}

impl ControlLoop {
    fn new(
        cfg: ScenarioConfig,
        zone: Option<Arc<SafeZone>>,
        closed_loop: ClosedLoop,
        opts: &TeleopOptions,
    ) -> Result<Self> {
        let (metrics, events) = match &opts.out {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let mut m = BufWriter::new(File::create(dir.join("metrics.csv"))?);
                writeln!(m, "{}", TickRecord::header())?;
                let e = BufWriter::new(File::create(dir.join("events.jsonl"))?);
                (Some(m), Some(e))
            }
            None => (None, None),
        };
        Ok(Self {
            period: Duration::from_secs_f64(cfg.dt() / opts.time_scale),
            cfg,
            zone,
            closed_loop,
            status: LoopStatus::Running,
            target: None,
            target_tick: None,
            tick: 0,
            seq: 0,
            resets: 0,
            fault: None,
            last: None,
            pending: None,
            metrics,
            events,
        })
    }

    fn log_event(&mut self, event: Value) {
        if let Some(f) = &mut self.events {
            if let Err(e) = writeln!(f, "{event}") {
                log::warn!("teleop: cannot write event: {e}");
            }
        }
    }

    fn inside(&self, p: &Vector3<f64>) -> bool {
        self.zone.as_ref().map_or(true, |z| z.contains(p))
    }

    fn apply(&mut self, cmd: Command) {
        match cmd {
            Command::SetTarget(target, reply) => {
                self.target = target;
                self.target_tick = target.map(|_| self.tick);
                let inside = target.map(|t| self.inside(&t));
                log::info!("teleop: target {:?} from tick {}", target.map(|t| [t.x, t.y, t.z]), self.tick);
                self.log_event(json!({
                    "tick": self.tick,
                    "event": "target",
                    "target": target.map(|t| [t.x, t.y, t.z]),
                    "inside": inside,
                }));
                let _ = reply.send(TargetAck {
                    v: PROTOCOL_VERSION,
                    kind: "target_ack".into(),
                    accepted: true,
                    target: target.map(|t| [t.x, t.y, t.z]),
                    inside,
                    applies_at_tick: self.tick,
                });
            }
            Command::Control(cmd, reply) => {
                let (accepted, message) = match (cmd, self.status) {
                    (LoopCommand::Pause, LoopStatus::Fault) => (false, Some("loop is faulted; reset first")),
                    (LoopCommand::Pause, _) => {
                        self.status = LoopStatus::Paused;
                        (true, None)
                    }
                    (LoopCommand::Resume, LoopStatus::Fault) => (false, Some("loop is faulted; reset first")),
                    (LoopCommand::Resume, _) => {
                        self.status = LoopStatus::Running;
                        (true, None)
                    }
                    (LoopCommand::Reset, _) => match ClosedLoop::new(&self.cfg, self.zone.clone()) {
                        Ok(cl) => {
                            self.closed_loop = cl.latch_faults(true);
                            self.status = LoopStatus::Running;
                            self.target = None;
                            self.target_tick = None;
                            self.fault = None;
                            self.resets += 1;
                            (true, None)
                        }
                        Err(e) => {
                            log::error!("teleop: reset failed: {e}");
                            (false, Some("reset failed"))
                        }
                    },
                };
                if accepted {
                    self.log_event(json!({ "tick": self.tick, "event": cmd.name() }));
                    self.republish_status();
                }
                let _ = reply.send(CommandAck {
                    v: PROTOCOL_VERSION,
                    kind: "ack".into(),
                    command: cmd.name().into(),
                    accepted,
                    status: self.status,
                    tick: self.tick,
                    message: message.map(String::from),
                });
            }
        }
    }

    /// Status changes are announced with the last tick's data.
    fn republish_status(&mut self) {
        if let Some(mut snap) = self.last.clone() {
            snap.status = self.status;
            snap.fault = self.fault.clone();
            snap.resets = self.resets;
            snap.target = self.target.map(|t| [t.x, t.y, t.z]);
            snap.target_tick = self.target_tick;
            snap.target_inside = self.target.map(|t| self.inside(&t));
            self.pending = Some(snap);
        }
    }

    fn snapshot(&mut self, out: &TickOutput) -> Snapshot {
        let r = &out.record;
        let finite = |v: f64| v.is_finite().then_some(v);
        let margin = self.cfg.safety_margin;
        self.seq += 1;
        Snapshot {
            v: PROTOCOL_VERSION,
            kind: "state".into(),
            seq: self.seq,
            tick: self.tick,
            t: self.tick as f64 * self.cfg.dt(),
            status: self.status,
            target: self.target.map(|t| [t.x, t.y, t.z]),
            target_tick: self.target_tick,
            target_inside: self.target.map(|t| self.inside(&t)),
            measured: out.measured.flat(),
            nominal: out.nominal.flat(),
            e_ee_real: finite(r.e_ee_real),
            e_ee_nom: finite(r.e_ee_nom),
            e_ee_local: r.e_ee_local,
            e_body_local: r.e_body_local,
            min_distance_real: finite(r.min_clearance_real + margin),
            min_distance_nom: finite(r.min_clearance_nom + margin),
            safety_margin: margin,
            solver_status: r.status.as_str().into(),
            iterations: r.iterations,
            input: r.u.iter().copied().collect(),
            mesh_id: mesh_id(&self.cfg),
            fault: self.fault.clone(),
            resets: self.resets,
        }
    }

    fn run(
        &mut self,
        commands: mpsc::Receiver<Command>,
        stream: broadcast::Sender<Arc<Published>>,
        latest: watch::Sender<Option<Arc<Published>>>,
        timing: watch::Sender<LoopTiming>,
        stop: &AtomicBool,
    ) {
        let publish = |snap: &Snapshot| {
            let json = match serde_json::to_string(snap) {
                Ok(j) => j,
                Err(e) => {
                    log::error!("teleop: cannot serialise snapshot: {e}");
                    return;
                }
            };
            let p = Arc::new(Published { seq: snap.seq, json });
            latest.send_replace(Some(p.clone()));
            // no receivers is fine
            let _ = stream.send(p);
        };
        let mut stats = LoopTiming::default();
        let mut deadline = Instant::now();
        while !stop.load(Ordering::SeqCst) {
            let now = Instant::now();
            let late = now.saturating_duration_since(deadline).as_secs_f64();
            stats.ticks += 1;
            stats.max_lateness = stats.max_lateness.max(late);
            stats.mean_lateness += (late - stats.mean_lateness) / stats.ticks as f64;
            timing.send_replace(stats);

            while let Ok(cmd) = commands.try_recv() {
                self.apply(cmd);
            }
            if let Some(mut snap) = self.pending.take() {
                self.seq += 1;
                snap.seq = self.seq;
                self.last = Some(snap.clone());
                publish(&snap);
            }

            if self.status == LoopStatus::Running {
                match self.closed_loop.step(self.target.as_ref(), 0) {
                    Ok(out) => {
                        if let Some(reason) = &out.fault {
                            self.status = LoopStatus::Fault;
                            self.fault = Some(reason.clone());
                            self.log_event(json!({ "tick": self.tick, "event": "fault", "reason": reason }));
                        }
                        let snap = self.snapshot(&out);
                        if let Some(m) = &mut self.metrics {
                            let mut rec = out.record.clone();
                            rec.tick = self.tick as usize;
                            rec.t = snap.t;
                            if let Err(e) = writeln!(m, "{}", rec.csv_row()) {
                                log::warn!("teleop: cannot write metrics: {e}");
                            }
                        }
                        publish(&snap);
                        self.last = Some(snap);
                        self.tick += 1;
                    }
                    Err(e) => {
                        log::error!("teleop: control loop error: {e}");
                        self.status = LoopStatus::Fault;
                        self.fault = Some(e.to_string());
                        self.republish_status();
                    }
                }
            }

            deadline += self.period;
            let now = Instant::now();
            if deadline > now {
                thread::sleep(deadline - now);
            } else if now - deadline > self.period {
                // too far behind to catch up; start a fresh schedule
                deadline = now;
            }
        }
        for f in [&mut self.metrics, &mut self.events].into_iter().flatten() {
            let _ = f.flush();
        }
    }
}
