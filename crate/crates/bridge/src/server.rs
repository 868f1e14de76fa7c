//! WebSocket endpoint around the haptic loop.
//!
//! Clients connect to `/steer` (at most one at a time) or `/observe`. Poses go
//! into a single latest-wins slot read by the loop thread. Frames leave the
//! loop through a bounded queue per client; a full queue drops the frame, so a
//! slow client never delays a tick.

use std::fs::File;
use std::io::{self, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded, Receiver, Sender, TrySendError};
use ess_core::haptics::{Engine, InputSource, RecordSink};
use ess_core::log::{LogHeader, LogWriter};
use ess_core::metrics::append_questionnaire;
use ess_core::session::assign_level;
use ess_core::{EngineConfig, SessionRecord, Vec3};
use tungstenite::handshake::server::{ErrorResponse, Request, Response};
use tungstenite::http::StatusCode;
use tungstenite::{Message, WebSocket};

use crate::protocol::{
    Contacts, ErrorCode, PoseIn, Questionnaire, StateFrame, TaskAction, TaskControl, TaskRequest,
    WireMessage,
};

pub const DEFAULT_PORT: u16 = 8765;
pub const PORT_ENV: &str = "ESS_PORT";

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub engine: EngineConfig,
    /// Upper bound on frames per second per client.
    pub frame_rate: f64,
    /// Session logs are written here when set.
    pub log_dir: Option<PathBuf>,
    /// Questionnaire answers are appended here (JSON lines) when set.
    pub questionnaire_path: Option<PathBuf>,
    /// Frames buffered per client before new ones are dropped.
    pub client_queue: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            engine: EngineConfig::default(),
            frame_rate: 60.0,
            log_dir: None,
            questionnaire_path: None,
            client_queue: 64,
        }
    }
}

/// Loop health counters.
#[derive(Debug, Default)]
pub struct LoopStats {
    ticks: AtomicU64,
    late_ticks: AtomicU64,
    max_lateness_us: AtomicU64,
    frames_sent: AtomicU64,
    frames_dropped: AtomicU64,
    sessions: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StatsSnapshot {
    pub ticks: u64,
    /// Ticks that started more than one period after their deadline.
    pub late_ticks: u64,
    pub max_lateness_us: u64,
    pub frames_sent: u64,
    pub frames_dropped: u64,
    pub sessions: u64,
}

impl LoopStats {
    fn snapshot(&self) -> StatsSnapshot {
        StatsSnapshot {
            ticks: self.ticks.load(Ordering::Relaxed),
            late_ticks: self.late_ticks.load(Ordering::Relaxed),
            max_lateness_us: self.max_lateness_us.load(Ordering::Relaxed),
            frames_sent: self.frames_sent.load(Ordering::Relaxed),
            frames_dropped: self.frames_dropped.load(Ordering::Relaxed),
            sessions: self.sessions.load(Ordering::Relaxed),
        }
    }
}

enum Command {
    Start(TaskRequest, Sender<Result<String, String>>),
    Abort(Sender<Result<String, String>>),
}

struct Shared {
    cfg: ServerConfig,
    scene_id: String,
    stop: AtomicBool,
    pose: Mutex<Option<PoseIn>>,
    commands: Sender<Command>,
    clients: Mutex<Vec<(u64, Sender<String>)>>,
    steering: Mutex<Option<u64>>,
    questionnaire: Mutex<()>,
    last_session: Mutex<String>,
    next_client: AtomicU64,
    stats: LoopStats,
}

impl Shared {
    fn broadcast(&self, text: &str) {
        let mut clients = self.clients.lock().unwrap();
        clients.retain(|(_, tx)| match tx.try_send(text.to_string()) {
            Ok(()) => {
                self.stats.frames_sent.fetch_add(1, Ordering::Relaxed);
                true
            }
            Err(TrySendError::Full(_)) => {
                self.stats.frames_dropped.fetch_add(1, Ordering::Relaxed);
                true
            }
            Err(TrySendError::Disconnected(_)) => false,
        });
    }
}

/// Running endpoint. Dropping it without [`Server::shutdown`] leaves the
/// threads running until the process exits.
pub struct Server {
    addr: SocketAddr,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl Server {
    pub fn start(addr: impl ToSocketAddrs, cfg: ServerConfig) -> io::Result<Server> {
        let cfg_engine = cfg
            .engine
            .clone()
            .validated()
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let (tx, rx) = unbounded();
        let scene_id = cfg_engine.hash()[..12].to_string();
        let shared = Arc::new(Shared {
            cfg: ServerConfig {
                engine: cfg_engine,
                ..cfg
            },
            scene_id,
            stop: AtomicBool::new(false),
            pose: Mutex::new(None),
            commands: tx,
            clients: Mutex::new(Vec::new()),
            steering: Mutex::new(None),
            questionnaire: Mutex::new(()),
            last_session: Mutex::new(String::new()),
            next_client: AtomicU64::new(1),
            stats: LoopStats::default(),
        });
        let loop_shared = Arc::clone(&shared);
        let accept_shared = Arc::clone(&shared);
        let threads = vec![
            thread::Builder::new()
                .name("ess-loop".into())
                .spawn(move || run_loop_thread(&loop_shared, rx))?,
            thread::Builder::new()
                .name("ess-accept".into())
                .spawn(move || accept_loop(&accept_shared, listener))?,
        ];
        Ok(Server {
            addr,
            shared,
            threads,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> StatsSnapshot {
        self.shared.stats.snapshot()
    }

    /// Blocks until the server stops.
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    pub fn shutdown(mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

fn accept_loop(shared: &Arc<Shared>, listener: TcpListener) {
    let mut connections = Vec::new();
    while !shared.stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let s = Arc::clone(shared);
                if let Ok(h) = thread::Builder::new()
                    .name("ess-client".into())
                    .spawn(move || serve_client(&s, stream))
                {
                    connections.push(h);
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                thread::sleep(Duration::from_millis(5));
            }
            Err(_) => thread::sleep(Duration::from_millis(5)),
        }
        connections.retain(|h: &JoinHandle<()>| !h.is_finished());
    }
    for h in connections {
        let _ = h.join();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Steer,
    Observe,
}

fn serve_client(shared: &Arc<Shared>, stream: TcpStream) {
    let _ = stream.set_nonblocking(false);
    let _ = stream.set_nodelay(true);
    let mut role = None;
    let callback = |req: &Request, resp: Response| -> Result<Response, ErrorResponse> {
        role = match req.uri().path() {
            "/steer" => Some(Role::Steer),
            "/observe" | "/" => Some(Role::Observe),
            _ => None,
        };
        if role.is_some() {
            Ok(resp)
        } else {
            let mut err = ErrorResponse::new(Some("use /steer or /observe".into()));
            *err.status_mut() = StatusCode::NOT_FOUND;
            Err(err)
        }
    };
    let Ok(mut ws) = tungstenite::accept_hdr(stream, callback) else {
        return;
    };
    let Some(role) = role else { return };
    let id = shared.next_client.fetch_add(1, Ordering::Relaxed);

    if role == Role::Steer {
        let mut steering = shared.steering.lock().unwrap();
        if steering.is_some() {
            drop(steering);
            let msg = WireMessage::error(ErrorCode::SteeringTaken, "another client is steering");
            let _ = ws.send(Message::text(msg.encode()));
            let _ = ws.close(None);
            let _ = ws.flush();
            return;
        }
        *steering = Some(id);
    }

    let (tx, rx) = bounded(shared.cfg.client_queue.max(1));
    shared.clients.lock().unwrap().push((id, tx));
    let _ = ws.get_mut().set_read_timeout(Some(Duration::from_millis(2)));
    let _ = ws.get_mut().set_write_timeout(Some(Duration::from_millis(500)));

    client_io(shared, &mut ws, role, &rx);

    shared.clients.lock().unwrap().retain(|(c, _)| *c != id);
    if role == Role::Steer {
        let mut steering = shared.steering.lock().unwrap();
        if *steering == Some(id) {
            *steering = None;
        }
    }
}

fn client_io(shared: &Shared, ws: &mut WebSocket<TcpStream>, role: Role, frames: &Receiver<String>) {
    loop {
        if shared.stop.load(Ordering::SeqCst) {
            let _ = ws.close(None);
            let _ = ws.flush();
            return;
        }
        match ws.read() {
            Ok(Message::Text(text)) => {
                if let Some(reply) = handle_text(shared, role, text.as_str()) {
                    if ws.send(Message::text(reply.encode())).is_err() {
                        return;
                    }
                }
            }
            Ok(Message::Binary(_)) => {
                let reply = WireMessage::error(ErrorCode::Malformed, "binary messages are not part of the protocol");
                if ws.send(Message::text(reply.encode())).is_err() {
                    return;
                }
            }
            Ok(Message::Close(_)) => {
                let _ = ws.flush();
                return;
            }
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(_) => return,
        }
        while let Ok(frame) = frames.try_recv() {
            if ws.send(Message::text(frame)).is_err() {
                return;
            }
        }
    }
}

fn handle_text(shared: &Shared, role: Role, text: &str) -> Option<WireMessage> {
    let msg = match WireMessage::decode(text) {
        Ok(m) => m,
        Err(e) => return Some(WireMessage::error(e.code(), e.to_string())),
    };
    match msg {
        WireMessage::PoseIn(p) if role == Role::Steer => {
            *shared.pose.lock().unwrap() = Some(p);
            None
        }
        WireMessage::TaskControl(tc) if role == Role::Steer => task_control(shared, tc),
        WireMessage::PoseIn(_) | WireMessage::TaskControl(_) => Some(WireMessage::error(
            ErrorCode::State,
            "only the steering client may send poses or task control",
        )),
        WireMessage::Questionnaire(q) => Some(questionnaire(shared, q)),
        WireMessage::StateFrame(_) | WireMessage::Error(_) => Some(WireMessage::error(
            ErrorCode::State,
            "message kind is server-to-client only",
        )),
    }
}

fn task_control(shared: &Shared, tc: TaskControl) -> Option<WireMessage> {
    let (reply_tx, reply_rx) = bounded(1);
    let cmd = match (tc.action, tc.task) {
        (TaskAction::Start, Some(req)) => Command::Start(req, reply_tx),
        (TaskAction::Start, None) => {
            return Some(WireMessage::error(ErrorCode::Validation, "start needs a task"))
        }
        (TaskAction::Abort, _) => Command::Abort(reply_tx),
    };
    if shared.commands.send(cmd).is_err() {
        return Some(WireMessage::error(ErrorCode::State, "loop is not running"));
    }
    match reply_rx.recv_timeout(Duration::from_secs(2)) {
        Ok(Ok(_)) => None,
        Ok(Err(msg)) => Some(WireMessage::error(ErrorCode::State, msg)),
        Err(_) => Some(WireMessage::error(ErrorCode::State, "loop did not answer")),
    }
}

/// Validates, stores and acknowledges by echoing the stored message.
fn questionnaire(shared: &Shared, q: Questionnaire) -> WireMessage {
    if let Err(msg) = q.validate() {
        return WireMessage::error(ErrorCode::Validation, msg);
    }
    let session = shared.last_session.lock().unwrap().clone();
    let record = q.to_record(&session);
    if let Some(path) = &shared.cfg.questionnaire_path {
        let _guard = shared.questionnaire.lock().unwrap();
        if let Err(e) = append_questionnaire(path, std::slice::from_ref(&record)) {
            return WireMessage::error(ErrorCode::State, format!("could not store answer: {e}"));
        }
    }
    WireMessage::Questionnaire(Questionnaire {
        session: Some(record.session),
        ..q
    })
}

/// Input source over a snapshot of the pose slot.
struct SlotSource(Option<Vec3>);

impl InputSource for SlotSource {
    fn pose_at(&mut self, _t: f64) -> Option<Vec3> {
        self.0
    }
}

struct Active {
    id: String,
    engine: Engine,
    log: Option<LogWriter<BufWriter<File>>>,
    started: Instant,
    last_bucket: Option<u64>,
}

fn start_session(shared: &Shared, req: &TaskRequest, count: u64) -> Result<Active, String> {
    let cfg = &shared.cfg.engine;
    let level = req.level.unwrap_or_else(|| assign_level(req.seed));
    let task = cfg
        .session
        .task(req.kind, level, req.seed)
        .map_err(|e| e.to_string())?;
    let id = format!("session-{count}-seed{}", req.seed);
    let log = match &shared.cfg.log_dir {
        Some(dir) => {
            let path = dir.join(format!("{id}.log"));
            let file = File::create(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            Some(LogWriter::new(BufWriter::new(file), &LogHeader::new(cfg, &task)).map_err(|e| e.to_string())?)
        }
        None => None,
    };
    *shared.last_session.lock().unwrap() = id.clone();
    Ok(Active {
        id,
        engine: Engine::new(cfg, &task),
        log,
        started: Instant::now(),
        last_bucket: None,
    })
}

fn frame(shared: &Shared, active: &Active, r: &SessionRecord, pose_t: Option<f64>) -> String {
    let status = active.engine.pipeline().status();
    WireMessage::StateFrame(StateFrame {
        session: active.id.clone(),
        tick: r.tick,
        t: r.t,
        position: r.position.into(),
        force: r.emitted_force.into(),
        fractured: r.fractured,
        contacts: Contacts {
            floor: r.floor_contact,
            penetration: r.penetration,
            goal: r.goal_hit,
            forbidden: r.forbidden_hit,
        },
        phase: status.phase,
        outcome: status.outcome().ok(),
        scene_id: shared.scene_id.clone(),
        pose_t,
    })
    .encode()
}

fn run_loop_thread(shared: &Shared, commands: Receiver<Command>) {
    let rate = shared.cfg.engine.loop_cfg.tick_rate;
    let period = Duration::from_secs_f64(1.0 / rate);
    let mut active: Option<Active> = None;
    let mut count = 0u64;
    // terminal frame held back so the frame rate bound also holds at the end
    let mut pending: Option<(Instant, String)> = None;

    while !shared.stop.load(Ordering::SeqCst) {
        if let Some((due, _)) = &pending {
            if Instant::now() >= *due {
                let (_, text) = pending.take().unwrap();
                shared.broadcast(&text);
            }
        }
        let cmd = if active.is_some() || pending.is_some() {
            commands.try_recv().ok()
        } else {
            commands.recv_timeout(Duration::from_millis(10)).ok()
        };
        match cmd {
            Some(Command::Start(req, reply)) => {
                if active.is_some() {
                    let _ = reply.send(Err("a session is already running".into()));
                } else {
                    count += 1;
                    let started = start_session(shared, &req, count);
                    let _ = reply.send(started.as_ref().map(|a| a.id.clone()).map_err(Clone::clone));
                    if let Ok(a) = started {
                        shared.stats.sessions.fetch_add(1, Ordering::Relaxed);
                        active = Some(a);
                    }
                }
                continue;
            }
            Some(Command::Abort(reply)) => match active.take() {
                Some(mut a) => {
                    let tick = a.engine.pipeline().next_tick();
                    if let Some(log) = &mut a.log {
                        log.abort(tick, "aborted by client");
                    }
                    let _ = reply.send(Ok(a.id));
                }
                None => {
                    let _ = reply.send(Err("no session is running".into()));
                }
            },
            None => {}
        }
        let Some(a) = active.as_mut() else { continue };

        let k = a.engine.pipeline().next_tick();
        let deadline = a.started + period.mul_f64(k as f64);
        let now = Instant::now();
        if deadline > now {
            thread::sleep(deadline - now);
        } else {
            let late = (now - deadline).as_micros() as u64;
            if late > period.as_micros() as u64 {
                shared.stats.late_ticks.fetch_add(1, Ordering::Relaxed);
            }
            shared.stats.max_lateness_us.fetch_max(late, Ordering::Relaxed);
        }

        let pose = shared.pose.lock().unwrap().clone();
        let mut source = SlotSource(pose.as_ref().map(|p| Vec3::from(p.position)));
        let record = match a.engine.tick(&mut source) {
            Ok(r) => r,
            Err(e) => {
                shared.broadcast(&WireMessage::error(ErrorCode::State, e.to_string()).encode());
                active = None;
                continue;
            }
        };
        shared.stats.ticks.fetch_add(1, Ordering::Relaxed);

        if let Some(log) = &mut a.log {
            if let Err(e) = log.accept(&record) {
                log.abort(record.tick, &e.to_string());
                shared.broadcast(&WireMessage::error(ErrorCode::State, e.to_string()).encode());
                active = None;
                continue;
            }
        }

        let terminated = a.engine.pipeline().status().is_terminated();
        let bucket = (k as f64 * shared.cfg.frame_rate / rate).floor() as u64;
        let fresh = a.last_bucket != Some(bucket);
        if fresh || terminated {
            a.last_bucket = Some(bucket);
            let text = frame(shared, a, &record, pose.map(|p| p.t));
            if fresh {
                shared.broadcast(&text);
            } else {
                let next = ((bucket + 1) as f64 * rate / shared.cfg.frame_rate).ceil();
                pending = Some((a.started + period.mul_f64(next), text));
            }
        }
        if terminated {
            let status = *a.engine.pipeline().status();
            if let Some(log) = &mut a.log {
                let _ = log.finish(&status);
            }
            active = None;
        }
    }
    if let Some(mut a) = active {
        let tick = a.engine.pipeline().next_tick();
        if let Some(log) = &mut a.log {
            log.abort(tick, "server shut down");
        }
    }
}
