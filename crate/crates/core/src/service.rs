//! Live mode: one simulation on its own thread, steered over a WebSocket.
//!
//! The simulation thread owns the session. Clients talk to it only through
//! [`WireMessage`] JSON: inbound text goes through an mpsc queue, outbound
//! state and events fan out on a broadcast channel whose slow receivers lose
//! the oldest messages instead of holding up the clock.

use crate::comms::ChannelSet;
use crate::experiment_log::ExperimentLog;
use crate::operator::{OperatorOutput, OperatorScript, RecordedChannels, RecordedCommand};
use crate::simulation::{SimConfig, SimError, Simulation};
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::{Html, IntoResponse};
use axum::routing::get;
use axum::Router;
use futures_util::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};
use thiserror::Error;
use tokio::sync::broadcast;

/// Rate of outbound "state" messages (wall clock).
pub const STATE_RATE_HZ: f64 = 60.0;
const BROADCAST_CAPACITY: usize = 64;
/// Most wall time the thread spends catching up before serving its queue.
const MAX_CATCH_UP: Duration = Duration::from_millis(20);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WireKind {
    State,
    Command,
    Config,
    Event,
    #[serde(other)]
    Unknown,
}

/// JSON envelope of every message on `/ws`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    #[serde(rename = "type")]
    pub kind: WireKind,
    pub seq: u64,
    pub t: f64,
    #[serde(default)]
    pub payload: serde_json::Value,
}

/// Payload of inbound "config" messages: either explicit per-stream
/// conditions or one delay and rate for all streams.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigUpdate {
    #[serde(default)]
    pub channels: Option<ChannelSet>,
    #[serde(default)]
    pub delay: Option<f64>,
    #[serde(default)]
    pub sample_rate: Option<f64>,
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("message seq {seq} does not follow {last}")]
    OutOfOrder { seq: u64, last: u64 },
    #[error("message type not accepted from clients")]
    Unsupported,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("live simulation aborted: {0}")]
    Aborted(String),
    #[error("session thread is gone")]
    SessionGone,
}

/// A live simulation plus everything needed to export it as a batch run.
pub struct LiveSession {
    base: SimConfig,
    sim: Simulation,
    commands: Vec<RecordedCommand>,
    channel_changes: Vec<RecordedChannels>,
    last_in_seq: Option<u64>,
    out_seq: u64,
    events_sent: usize,
    aborted: Option<SimError>,
}

impl LiveSession {
    /// The scenario is replaced by live input.
    pub fn new(mut config: SimConfig) -> Result<Self, SimError> {
        config.scenario = OperatorScript::Idle;
        config.stop_when_done = false;
        let sim = Simulation::new(config.clone())?;
        Ok(LiveSession {
            base: config,
            sim,
            commands: Vec::new(),
            channel_changes: Vec::new(),
            last_in_seq: None,
            out_seq: 0,
            events_sent: 0,
            aborted: None,
        })
    }

    pub fn simulation(&self) -> &Simulation {
        &self.sim
    }

    pub fn time(&self) -> f64 {
        self.sim.time()
    }

    /// False once the configured duration is used up or the run aborted.
    pub fn running(&self) -> bool {
        self.aborted.is_none() && !self.sim.finished()
    }

    pub fn handle_text(&mut self, text: &str) -> Result<(), ServiceError> {
        let msg: WireMessage =
            serde_json::from_str(text).map_err(|e| ServiceError::Malformed(e.to_string()))?;
        self.handle(&msg)
    }

    /// Applies one client message at the next tick boundary.
    pub fn handle(&mut self, msg: &WireMessage) -> Result<(), ServiceError> {
        if let Some(last) = self.last_in_seq {
            if msg.seq <= last {
                return Err(ServiceError::OutOfOrder { seq: msg.seq, last });
            }
        }
        match msg.kind {
            WireKind::Command => {
                let cmd: OperatorOutput = serde_json::from_value(msg.payload.clone())
                    .map_err(|e| ServiceError::Malformed(e.to_string()))?;
                if !cmd
                    .master_err
                    .iter()
                    .chain(&cmd.pose_nudge)
                    .chain(&cmd.external_impulse)
                    .all(|v| v.is_finite())
                {
                    return Err(ServiceError::Malformed("non-finite command".into()));
                }
                self.sim.operator_mut().set_live_command(cmd);
                let tick = self.sim.tick();
                if let Some(last) = self.commands.last_mut().filter(|c| c.tick == tick) {
                    last.command = cmd;
                } else {
                    self.commands.push(RecordedCommand { tick, command: cmd });
                }
            }
            WireKind::Config => {
                let up: ConfigUpdate = serde_json::from_value(msg.payload.clone())
                    .map_err(|e| ServiceError::Malformed(e.to_string()))?;
                let current = self.sim.channels();
                let channels = match (up.channels, up.delay, up.sample_rate) {
                    (Some(c), None, None) => c,
                    (None, d, r) if d.is_some() || r.is_some() => ChannelSet::uniform(
                        d.unwrap_or(current.f_fb.delay),
                        r.unwrap_or(current.f_fb.sample_rate),
                    ),
                    _ => {
                        return Err(ServiceError::Malformed(
                            "config needs channels or delay/sample_rate".into(),
                        ))
                    }
                };
                self.sim.set_channels(channels)?;
                let tick = self.sim.tick();
                if let Some(last) = self.channel_changes.last_mut().filter(|c| c.tick == tick) {
                    last.channels = channels;
                } else {
                    self.channel_changes
                        .push(RecordedChannels { tick, channels });
                }
            }
            WireKind::Unknown => {
                log::warn!("ignoring message of unknown type (seq {})", msg.seq);
            }
            WireKind::State | WireKind::Event => return Err(ServiceError::Unsupported),
        }
        self.last_in_seq = Some(msg.seq);
        Ok(())
    }

    /// Advances one tick unless the session has ended.
    pub fn step(&mut self) -> Result<(), ServiceError> {
        if !self.running() {
            return Ok(());
        }
        if let Err(e) = self.sim.step() {
            let reason = e.to_string();
            self.aborted = Some(e);
            return Err(ServiceError::Aborted(reason));
        }
        Ok(())
    }

    fn envelope(&mut self, kind: WireKind, payload: serde_json::Value) -> WireMessage {
        self.out_seq += 1;
        WireMessage {
            kind,
            seq: self.out_seq,
            t: self.sim.time(),
            payload,
        }
    }

    pub fn state_message(&mut self) -> WireMessage {
        let snap = serde_json::to_value(self.sim.snapshot()).expect("snapshot serializes");
        self.envelope(WireKind::State, snap)
    }

    /// Events recorded since the last call, as outbound messages.
    pub fn drain_events(&mut self) -> Vec<WireMessage> {
        let fresh: Vec<_> = self.sim.events()[self.events_sent..].to_vec();
        self.events_sent += fresh.len();
        fresh
            .into_iter()
            .map(|e| {
                self.envelope(
                    WireKind::Event,
                    serde_json::json!({ "t": e.t, "text": e.text }),
                )
            })
            .collect()
    }

    /// Batch configuration that reproduces this session tick for tick.
    pub fn exported_config(&self) -> SimConfig {
        let mut c = self.base.clone();
        c.scenario = OperatorScript::Recorded {
            commands: self.commands.clone(),
            channel_changes: self.channel_changes.clone(),
        };
        c.duration = self.sim.tick() as f64 * c.dt;
        c
    }

    /// Ends the session. The log header carries [`Self::exported_config`];
    /// an aborted session yields its partial log inside the error.
    pub fn finish(self) -> Result<ExperimentLog, SimError> {
        let config = self.exported_config();
        if let Some(e) = self.aborted {
            return Err(e);
        }
        self.sim.finish_with(&config)
    }
}

enum Inbound {
    Text(String),
    Shutdown(mpsc::Sender<Result<ExperimentLog, SimError>>),
}

/// Handle to a session running on its own thread.
pub struct SessionHandle {
    inbound: mpsc::Sender<Inbound>,
    outbound: broadcast::Sender<String>,
    thread: Option<JoinHandle<()>>,
}

/// Starts a session whose clock runs `rtf` times faster than the wall clock.
pub fn spawn_session(config: SimConfig, rtf: f64) -> Result<SessionHandle, ServiceError> {
    if !(rtf.is_finite() && rtf > 0.0) {
        return Err(SimError::Config("real-time factor must be positive".into()).into());
    }
    let mut session = LiveSession::new(config)?;
    let (in_tx, in_rx) = mpsc::channel::<Inbound>();
    let (out_tx, _) = broadcast::channel::<String>(BROADCAST_CAPACITY);
    let out = out_tx.clone();
    let thread = std::thread::Builder::new()
        .name("fic-sim".into())
        .spawn(move || {
            run_session(&mut session, in_rx, out, rtf).map_or((), |reply| {
                let _ = reply.send(session.finish());
            })
        })?;
    Ok(SessionHandle {
        inbound: in_tx,
        outbound: out_tx,
        thread: Some(thread),
    })
}

fn publish(out: &broadcast::Sender<String>, msg: &WireMessage) {
    // No subscribers is fine; lagging ones drop their oldest entries.
    let _ = out.send(serde_json::to_string(msg).expect("message serializes"));
}

/// Session loop. Returns the reply channel when asked to shut down.
fn run_session(
    session: &mut LiveSession,
    inbound: mpsc::Receiver<Inbound>,
    out: broadcast::Sender<String>,
    rtf: f64,
) -> Option<mpsc::Sender<Result<ExperimentLog, SimError>>> {
    let period = Duration::from_secs_f64(1.0 / STATE_RATE_HZ);
    let start = Instant::now();
    let sim_start = session.time();
    let mut last_state = Instant::now() - period;
    loop {
        let mut first = true;
        loop {
            let next = if first {
                inbound.recv_timeout(Duration::from_millis(1))
            } else {
                inbound.try_recv().map_err(|e| match e {
                    mpsc::TryRecvError::Empty => mpsc::RecvTimeoutError::Timeout,
                    mpsc::TryRecvError::Disconnected => mpsc::RecvTimeoutError::Disconnected,
                })
            };
            first = false;
            match next {
                Ok(Inbound::Text(text)) => {
                    if let Err(e) = session.handle_text(&text) {
                        log::warn!("rejected client message: {e}");
                    }
                }
                Ok(Inbound::Shutdown(reply)) => return Some(reply),
                Err(mpsc::RecvTimeoutError::Timeout) => break,
                Err(mpsc::RecvTimeoutError::Disconnected) => return None,
            }
        }

        let target = sim_start + start.elapsed().as_secs_f64() * rtf;
        let budget = Instant::now();
        while session.running() && session.time() < target && budget.elapsed() < MAX_CATCH_UP {
            if let Err(e) = session.step() {
                log::error!("live simulation stopped: {e}");
                let msg = session.envelope(
                    WireKind::Event,
                    serde_json::json!({ "t": session.time(), "text": format!("abort:{e}") }),
                );
                publish(&out, &msg);
            }
        }
        for msg in session.drain_events() {
            publish(&out, &msg);
        }
        if last_state.elapsed() >= period {
            last_state = Instant::now();
            let msg = session.state_message();
            publish(&out, &msg);
        }
    }
}

impl SessionHandle {
    /// Queues a raw client message for the session thread.
    pub fn send_text(&self, text: String) -> Result<(), ServiceError> {
        self.inbound
            .send(Inbound::Text(text))
            .map_err(|_| ServiceError::SessionGone)
    }

    pub fn subscribe(&self) -> broadcast::Receiver<String> {
        self.outbound.subscribe()
    }

    /// Stops the clock and returns the session log. Blocks until the thread
    /// has finished.
    pub fn shutdown(mut self) -> Result<ExperimentLog, ServiceError> {
        let (tx, rx) = mpsc::channel();
        self.inbound
            .send(Inbound::Shutdown(tx))
            .map_err(|_| ServiceError::SessionGone)?;
        let result = rx.recv().map_err(|_| ServiceError::SessionGone)?;
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        Ok(result?)
    }
}

#[derive(Clone)]
struct AppState {
    inbound: mpsc::Sender<Inbound>,
    outbound: broadcast::Sender<String>,
}

const PLACEHOLDER_INDEX: &str = "<!doctype html><title>fic-teleop</title>\
<p>fic-teleop live service. The operator console bundle was not found; \
connect a client to <code>/ws</code>.</p>";

/// HTTP routes: `/ws` plus the UI bundle (or a placeholder page) at `/`.
pub fn router(handle: &SessionHandle, static_dir: Option<&Path>) -> Router {
    let state = AppState {
        inbound: handle.inbound.clone(),
        outbound: handle.outbound.clone(),
    };
    let app = Router::new()
        .route("/ws", get(ws_upgrade))
        .with_state(state);
    match static_dir.filter(|d| d.join("index.html").is_file()) {
        Some(dir) => app.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => app.route("/", get(|| async { Html(PLACEHOLDER_INDEX) })),
    }
}

async fn ws_upgrade(ws: WebSocketUpgrade, State(app): State<AppState>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| client(socket, app))
}

async fn client(socket: WebSocket, app: AppState) {
    let (mut sink, mut stream) = socket.split();
    let mut feed = app.outbound.subscribe();
    let forward = tokio::spawn(async move {
        loop {
            match feed.recv().await {
                Ok(text) => {
                    if sink.send(Message::Text(text.into())).await.is_err() {
                        break;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    log::debug!("client lagging, dropped {n} messages")
                }
                Err(broadcast::error::RecvError::Closed) => break,
            }
        }
    });
    while let Some(Ok(msg)) = stream.next().await {
        match msg {
            Message::Text(text) => {
                if app.inbound.send(Inbound::Text(text.to_string())).is_err() {
                    break;
                }
            }
            Message::Close(_) => break,
            _ => {}
        }
    }
    forward.abort();
}

pub struct ServeOptions {
    pub addr: SocketAddr,
    pub config: SimConfig,
    pub rtf: f64,
    pub static_dir: Option<PathBuf>,
    /// Where to write the session log on shutdown.
    pub log_path: Option<PathBuf>,
}

/// Runs the service until `shutdown` resolves, then writes the session log.
pub async fn serve(
    opts: ServeOptions,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<ExperimentLog, ServiceError> {
    let handle = spawn_session(opts.config, opts.rtf)?;
    let app = router(&handle, opts.static_dir.as_deref());
    let listener = tokio::net::TcpListener::bind(opts.addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(shutdown)
        .await?;
    let log = tokio::task::spawn_blocking(move || handle.shutdown())
        .await
        .map_err(|_| ServiceError::SessionGone)??;
    if let Some(path) = &opts.log_path {
        log.write_to(path).map_err(SimError::from)?;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(kind: WireKind, seq: u64, payload: serde_json::Value) -> WireMessage {
        WireMessage {
            kind,
            seq,
            t: 0.0,
            payload,
        }
    }

    fn session() -> LiveSession {
        let mut c = SimConfig::nominal();
        c.duration = 1.0;
        LiveSession::new(c).unwrap()
    }

    #[test]
    fn wire_format_uses_a_type_field() {
        let m = msg(WireKind::State, 3, serde_json::json!({"a": 1}));
        let text = serde_json::to_string(&m).unwrap();
        assert!(text.contains(r#""type":"state""#));
        let back: WireMessage = serde_json::from_str(r#"{"type":"bogus","seq":1,"t":0}"#).unwrap();
        assert_eq!(back.kind, WireKind::Unknown);
    }

    #[test]
    fn rejects_bad_messages_and_keeps_going() {
        let mut s = session();
        assert!(s.handle_text("not json").is_err());
        assert!(s
            .handle(&msg(
                WireKind::Command,
                1,
                serde_json::json!({"master_err": "x"})
            ))
            .is_err());
        assert!(s
            .handle(&msg(WireKind::State, 2, serde_json::json!({})))
            .is_err());
        s.handle(&msg(
            WireKind::Command,
            3,
            serde_json::json!({"gripper_held": true}),
        ))
        .unwrap();
        assert!(matches!(
            s.handle(&msg(WireKind::Command, 3, serde_json::json!({}))),
            Err(ServiceError::OutOfOrder { .. })
        ));
        s.handle(&msg(WireKind::Unknown, 4, serde_json::Value::Null))
            .unwrap();
        assert!(s
            .handle(&msg(
                WireKind::Config,
                5,
                serde_json::json!({"delay": -1.0})
            ))
            .is_err());
        s.step().unwrap();
        assert!(s.simulation().last_command().gripper_held);
    }

    #[test]
    fn held_gripper_drifts_the_reference() {
        let mut s = session();
        let cmd = serde_json::json!({"master_err": [0.02, 0.0], "master_held": true, "gripper_held": true});
        s.handle(&msg(WireKind::Command, 1, cmd)).unwrap();
        let x0 = s.simulation().snapshot().x_desired_master[0];
        for _ in 0..5000 {
            s.step().unwrap();
        }
        let x1 = s.simulation().snapshot().x_desired_master[0];
        // Velocity mode integrates the master displacement at rate_gain = 1/s.
        assert!((x1 - x0 - 0.02 * 0.5).abs() < 1e-3, "{}", x1 - x0);
    }

    #[test]
    fn outbound_seq_increases() {
        let mut s = session();
        let a = s.state_message();
        let b = s.state_message();
        assert!(b.seq > a.seq);
        assert_eq!(a.kind, WireKind::State);
    }
}
