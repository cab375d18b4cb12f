//! Live layout sessions. Each session runs one worker thread that owns the
//! layout; controls arrive over a queue and are applied just before the next
//! frame is computed.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use nebula_core::layout::INITIAL_TEMPERATURE;
use nebula_core::subgraph::{self, NodeSet};
use nebula_core::{Area, LayoutState, Selection, Subgraph, SubgraphPayload, Vec2};
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, oneshot};

use crate::config::{valid_frame_rate, valid_iters_per_frame};
use crate::datasets::Dataset;
use crate::error::ApiError;
use crate::protocol::{
    encode_frame, ClientMessage, ControlMessage, ServerMessage, SessionStatus, SubgraphReason,
};

const EVENT_CAPACITY: usize = 1024;
/// A move on a frozen layout re-heats to this fraction of the initial temperature.
const NUDGE_REHEAT: f64 = 0.1;
/// How long a paused or frozen worker sleeps between queue checks.
const IDLE_WAIT: Duration = Duration::from_secs(3600);

#[derive(Debug, Clone)]
pub struct Frame {
    pub frame_no: u32,
    /// Layout iterations completed when the frame was taken.
    pub iteration: u64,
    pub node_count: u32,
    pub bytes: Bytes,
}

#[derive(Debug, Clone)]
pub enum Event {
    Frame(Frame),
    /// A serialized [`ServerMessage`].
    Text(Arc<str>),
    /// The worker has stopped; no further events follow.
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub dataset_id: String,
    pub status: SessionStatus,
    pub frame_no: u32,
    pub iteration: u64,
    pub node_count: usize,
    pub edge_count: usize,
    pub frame_rate: f64,
    pub iters_per_frame: u32,
    pub temperature: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionParams {
    pub seed: u64,
    pub area: Area,
    pub frame_rate: f64,
    pub iters_per_frame: u32,
}

/// Result of a control submitted with a reply channel.
#[derive(Debug, Clone)]
pub struct Applied {
    /// First frame reflecting the control.
    pub frame_no: u32,
    pub subgraph: Arc<SubgraphPayload>,
}

type Reply = oneshot::Sender<Result<Applied, ApiError>>;

struct Command {
    seq: Option<u64>,
    control: ControlMessage,
    reply: Option<Reply>,
}

struct Shared {
    info: Mutex<SessionInfo>,
    /// Latest `subgraph` message, sent to clients as they connect.
    subgraph_message: Mutex<Arc<str>>,
    created: Instant,
    /// Milliseconds since `created` of the last client activity.
    last_active_ms: AtomicU64,
}

pub struct SessionHandle {
    id: String,
    commands: mpsc::Sender<Command>,
    events: broadcast::Sender<Event>,
    shared: Arc<Shared>,
}

impl SessionHandle {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn info(&self) -> SessionInfo {
        self.shared.info.lock().unwrap().clone()
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Event> {
        self.events.subscribe()
    }

    pub fn subgraph_message(&self) -> Arc<str> {
        self.shared.subgraph_message.lock().unwrap().clone()
    }

    pub fn client_count(&self) -> usize {
        self.events.receiver_count()
    }

    pub fn touch(&self) {
        let ms = self.shared.created.elapsed().as_millis() as u64;
        self.shared.last_active_ms.fetch_max(ms, Ordering::Relaxed);
    }

    pub fn idle_for(&self) -> Duration {
        let last = Duration::from_millis(self.shared.last_active_ms.load(Ordering::Relaxed));
        self.shared.created.elapsed().saturating_sub(last)
    }

    fn closed() -> ApiError {
        ApiError::new(
            axum::http::StatusCode::GONE,
            "session_closed",
            "session has been closed",
        )
    }

    /// Queues a message; results are reported as ack or error events.
    pub fn send(&self, msg: ClientMessage) -> Result<(), ApiError> {
        self.touch();
        self.commands
            .send(Command {
                seq: msg.seq,
                control: msg.control,
                reply: None,
            })
            .map_err(|_| Self::closed())
    }

    /// Queues a control and waits until the worker has applied it.
    pub async fn apply(&self, control: ControlMessage) -> Result<Applied, ApiError> {
        self.touch();
        let (tx, rx) = oneshot::channel();
        self.commands
            .send(Command {
                seq: None,
                control,
                reply: Some(tx),
            })
            .map_err(|_| Self::closed())?;
        rx.await.map_err(|_| Self::closed())?
    }

    pub fn close(&self) {
        let _ = self.commands.send(Command {
            seq: None,
            control: ControlMessage::Close,
            reply: None,
        });
    }
}

impl Drop for SessionHandle {
    fn drop(&mut self) {
        self.close();
    }
}

struct Worker {
    dataset: Arc<Dataset>,
    subgraph: Subgraph,
    payload: Arc<SubgraphPayload>,
    layout: LayoutState,
    status: SessionStatus,
    frame_no: u32,
    frame_rate: f64,
    iters_per_frame: u32,
    expansions: u64,
    events: broadcast::Sender<Event>,
    shared: Arc<Shared>,
}

impl Worker {
    fn interval(&self) -> Duration {
        Duration::from_secs_f64(1.0 / self.frame_rate)
    }

    fn broadcast(&self, msg: &ServerMessage) {
        let _ = self.events.send(Event::Text(msg.to_json().into()));
    }

    fn publish_info(&self) {
        let mut info = self.shared.info.lock().unwrap();
        info.status = self.status;
        info.frame_no = self.frame_no;
        info.iteration = self.layout.iteration();
        info.node_count = self.subgraph.node_count();
        info.edge_count = self.subgraph.edge_count();
        info.frame_rate = self.frame_rate;
        info.iters_per_frame = self.iters_per_frame;
        info.temperature = self.layout.temperature();
    }

    fn set_status(&mut self, status: SessionStatus) {
        self.status = status;
        self.broadcast(&ServerMessage::Status {
            status,
            frame_no: self.frame_no,
        });
        self.publish_info();
    }

    fn emit_frame(&mut self) {
        self.frame_no += 1;
        let bytes = encode_frame(self.frame_no, self.layout.positions());
        let _ = self.events.send(Event::Frame(Frame {
            frame_no: self.frame_no,
            iteration: self.layout.iteration(),
            node_count: self.layout.len() as u32,
            bytes: Bytes::from(bytes),
        }));
        self.publish_info();
    }

    fn step_and_emit(&mut self) {
        if let Err(e) = self.layout.step(&self.subgraph, self.iters_per_frame as usize) {
            tracing::error!(error = %e, "layout step failed");
        }
        self.emit_frame();
        if self.layout.is_cooled() {
            self.set_status(SessionStatus::Frozen);
        }
    }

    fn run(mut self, commands: mpsc::Receiver<Command>) {
        let mut pending: Vec<Command> = Vec::new();
        let mut next_tick = Instant::now() + self.interval();
        loop {
            let wait = if self.status == SessionStatus::Running {
                next_tick.saturating_duration_since(Instant::now())
            } else {
                IDLE_WAIT
            };
            match commands.recv_timeout(wait) {
                Ok(cmd) => {
                    pending.push(cmd);
                    pending.extend(commands.try_iter());
                    if self.status == SessionStatus::Running {
                        // Applied at the next tick, before that frame is computed.
                        continue;
                    }
                    let (moved, close) = self.apply_all(&mut pending);
                    if close {
                        break;
                    }
                    if self.status == SessionStatus::Running {
                        next_tick = Instant::now() + self.interval();
                    } else if moved {
                        self.emit_frame();
                    }
                }
                Err(mpsc::RecvTimeoutError::Timeout) => {
                    if self.status != SessionStatus::Running {
                        continue;
                    }
                    let (moved, close) = self.apply_all(&mut pending);
                    if close {
                        break;
                    }
                    if self.status == SessionStatus::Running {
                        self.step_and_emit();
                    } else if moved {
                        self.emit_frame();
                    }
                    next_tick = (next_tick + self.interval()).max(Instant::now());
                }
                Err(mpsc::RecvTimeoutError::Disconnected) => break,
            }
        }
        self.set_status(SessionStatus::Closed);
        let _ = self.events.send(Event::Closed);
    }

    /// Applies queued commands in order. Of several drags of one node, only
    /// the last before the next expansion is applied; all are acknowledged.
    fn apply_all(&mut self, pending: &mut Vec<Command>) -> (bool, bool) {
        let mut superseded = vec![false; pending.len()];
        let mut seen = HashSet::new();
        for (i, cmd) in pending.iter().enumerate().rev() {
            match cmd.control {
                ControlMessage::Expand { .. } => seen.clear(),
                ControlMessage::Drag { index, .. } => superseded[i] = !seen.insert(index),
                _ => {}
            }
        }
        let mut moved = false;
        for (cmd, skip) in pending.drain(..).zip(superseded) {
            if cmd.control == ControlMessage::Close {
                return (moved, true);
            }
            let result = if skip {
                Ok(())
            } else {
                self.apply_one(&cmd.control)
            };
            match result {
                Ok(()) => {
                    moved |= cmd.control.moves_nodes();
                    let frame_no = self.frame_no + 1;
                    if let Some(seq) = cmd.seq {
                        self.broadcast(&ServerMessage::Ack { seq, frame_no });
                    }
                    if let Some(reply) = cmd.reply {
                        let _ = reply.send(Ok(Applied {
                            frame_no,
                            subgraph: self.payload.clone(),
                        }));
                    }
                }
                Err(e) => {
                    self.broadcast(&ServerMessage::Error {
                        seq: cmd.seq,
                        code: e.code.to_owned(),
                        message: e.message.clone(),
                    });
                    if let Some(reply) = cmd.reply {
                        let _ = reply.send(Err(e));
                    }
                }
            }
        }
        (moved, false)
    }

    /// A frozen layout starts running again when something moves.
    fn wake(&mut self, reheat: bool) {
        if self.status == SessionStatus::Frozen {
            if reheat {
                let area = self.layout.area();
                let t = NUDGE_REHEAT * INITIAL_TEMPERATURE * area.width.min(area.height);
                self.layout.set_temperature(t.max(self.layout.temperature()));
            }
            self.set_status(SessionStatus::Running);
        }
    }

    fn apply_one(&mut self, control: &ControlMessage) -> Result<(), ApiError> {
        match *control {
            ControlMessage::Pin { index, x, y } | ControlMessage::Drag { index, x, y } => {
                self.layout.pin(index, Vec2::new(x, y))?;
                self.wake(true);
            }
            ControlMessage::Unpin { index } => {
                self.layout.unpin(index)?;
                self.wake(true);
            }
            ControlMessage::Pause => {
                if self.status == SessionStatus::Running {
                    self.set_status(SessionStatus::Paused);
                }
            }
            ControlMessage::Resume => {
                if self.status == SessionStatus::Paused {
                    self.set_status(SessionStatus::Running);
                }
            }
            ControlMessage::SetParams {
                frame_rate,
                iters_per_frame,
            } => {
                if let Some(f) = frame_rate.filter(|f| !valid_frame_rate(*f)) {
                    return Err(ApiError::bad_request(format!("invalid frame_rate {f}")));
                }
                if let Some(i) = iters_per_frame.filter(|i| !valid_iters_per_frame(*i)) {
                    return Err(ApiError::bad_request(format!("invalid iters_per_frame {i}")));
                }
                self.frame_rate = frame_rate.unwrap_or(self.frame_rate);
                self.iters_per_frame = iters_per_frame.unwrap_or(self.iters_per_frame);
                self.publish_info();
            }
            ControlMessage::Expand { index, hops, cap } => self.expand(index, hops, cap)?,
            ControlMessage::Close => {}
        }
        Ok(())
    }

    fn expand(&mut self, index: usize, hops: usize, cap: usize) -> Result<(), ApiError> {
        let node = self
            .subgraph
            .nodes
            .get(index)
            .ok_or_else(|| {
                ApiError::from(nebula_core::LayoutError::IndexOutOfRange {
                    index,
                    len: self.subgraph.node_count(),
                })
            })?
            .internal;
        let store = &self.dataset.store;
        let grown = subgraph::expand(store, &NodeSet::from_iter([node]), hops, cap)?;
        let old = self.subgraph.node_ids();
        let merged = old.union(&grown);
        if merged.len() == old.len() {
            return Ok(());
        }
        let mut sub = subgraph::induce(store, &merged)?;
        sub.origin.selection = format!(
            "{} + {hops}-hop expansion of {}",
            self.subgraph.origin.selection, self.subgraph.nodes[index].external_id
        );
        let payload = Arc::new(self.dataset.payload(&sub)?);
        let origin = self.layout.positions()[index];
        self.expansions += 1;
        self.layout = self
            .layout
            .regrow(old.as_slice(), merged.as_slice(), origin, self.expansions);
        self.subgraph = sub;
        self.payload = payload;
        let msg = ServerMessage::Subgraph {
            frame_no: self.frame_no + 1,
            reason: SubgraphReason::Expand,
            subgraph: (*self.payload).clone(),
        }
        .to_json();
        *self.shared.subgraph_message.lock().unwrap() = msg.clone().into();
        let _ = self.events.send(Event::Text(msg.into()));
        self.wake(false);
        self.publish_info();
        Ok(())
    }
}

fn new_session_id() -> String {
    use rand::Rng;
    format!("{:032x}", rand::rng().random::<u128>())
}

pub struct SessionManager {
    sessions: Mutex<HashMap<String, Arc<SessionHandle>>>,
    max_sessions: usize,
}

impl SessionManager {
    pub fn new(max_sessions: usize) -> Self {
        Self {
            sessions: Mutex::new(HashMap::new()),
            max_sessions,
        }
    }

    fn too_many(&self) -> ApiError {
        ApiError::new(
            axum::http::StatusCode::TOO_MANY_REQUESTS,
            "too_many_sessions",
            format!("at most {} concurrent sessions", self.max_sessions),
        )
    }

    /// Resolves the selection, induces the subgraph and starts the worker.
    /// Blocks on store reads.
    pub fn create(
        &self,
        dataset: Arc<Dataset>,
        selection: &Selection,
        params: SessionParams,
    ) -> Result<(Arc<SessionHandle>, Arc<SubgraphPayload>), ApiError> {
        if self.len() >= self.max_sessions {
            return Err(self.too_many());
        }
        if !valid_frame_rate(params.frame_rate) {
            return Err(ApiError::bad_request(format!(
                "invalid frame_rate {}",
                params.frame_rate
            )));
        }
        if !valid_iters_per_frame(params.iters_per_frame) {
            return Err(ApiError::bad_request(format!(
                "invalid iters_per_frame {}",
                params.iters_per_frame
            )));
        }
        let sub = selection.induce(&dataset.store)?;
        if sub.nodes.is_empty() {
            return Err(ApiError::empty_selection());
        }
        let layout = LayoutState::new(&sub, params.seed, params.area)?;
        let payload = Arc::new(dataset.payload(&sub)?);
        let id = new_session_id();
        let subgraph_message: Arc<str> = ServerMessage::Subgraph {
            frame_no: 1,
            reason: SubgraphReason::Initial,
            subgraph: (*payload).clone(),
        }
        .to_json()
        .into();
        let shared = Arc::new(Shared {
            info: Mutex::new(SessionInfo {
                session_id: id.clone(),
                dataset_id: dataset.id.clone(),
                status: SessionStatus::Running,
                frame_no: 0,
                iteration: 0,
                node_count: sub.node_count(),
                edge_count: sub.edge_count(),
                frame_rate: params.frame_rate,
                iters_per_frame: params.iters_per_frame,
                temperature: layout.temperature(),
                seed: params.seed,
            }),
            subgraph_message: Mutex::new(subgraph_message),
            created: Instant::now(),
            last_active_ms: AtomicU64::new(0),
        });
        let (events, _) = broadcast::channel(EVENT_CAPACITY);
        let (tx, rx) = mpsc::channel();
        let worker = Worker {
            dataset,
            subgraph: sub,
            payload: payload.clone(),
            layout,
            status: SessionStatus::Running,
            frame_no: 0,
            frame_rate: params.frame_rate,
            iters_per_frame: params.iters_per_frame,
            expansions: 0,
            events: events.clone(),
            shared: shared.clone(),
        };
        let handle = Arc::new(SessionHandle {
            id: id.clone(),
            commands: tx,
            events,
            shared,
        });

        let mut sessions = self.sessions.lock().unwrap();
        if sessions.len() >= self.max_sessions {
            return Err(self.too_many());
        }
        thread::Builder::new()
            .name(format!("session-{}", &id[..8]))
            .spawn(move || worker.run(rx))
            .map_err(|e| ApiError::internal(format!("cannot start session worker: {e}")))?;
        sessions.insert(id, handle.clone());
        Ok((handle, payload))
    }

    pub fn get(&self, id: &str) -> Result<Arc<SessionHandle>, ApiError> {
        self.sessions
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::unknown_session(id))
    }

    pub fn len(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn list(&self) -> Vec<SessionInfo> {
        let mut out: Vec<SessionInfo> = self
            .sessions
            .lock()
            .unwrap()
            .values()
            .map(|h| h.info())
            .collect();
        out.sort_by(|a, b| a.session_id.cmp(&b.session_id));
        out
    }

    /// Stops the worker and forgets the session.
    pub fn remove(&self, id: &str) -> Result<(), ApiError> {
        let handle = self
            .sessions
            .lock()
            .unwrap()
            .remove(id)
            .ok_or_else(|| ApiError::unknown_session(id))?;
        handle.close();
        Ok(())
    }

    /// Closes sessions with no connected client and no activity for `timeout`.
    pub fn reap_idle(&self, timeout: Duration) -> Vec<String> {
        let mut sessions = self.sessions.lock().unwrap();
        let idle: Vec<String> = sessions
            .iter()
            .filter(|(_, h)| h.client_count() == 0 && h.idle_for() >= timeout)
            .map(|(id, _)| id.clone())
            .collect();
        for id in &idle {
            if let Some(h) = sessions.remove(id) {
                h.close();
            }
        }
        idle
    }

    pub fn close_all(&self) {
        for (_, h) in self.sessions.lock().unwrap().drain() {
            h.close();
        }
    }
}
