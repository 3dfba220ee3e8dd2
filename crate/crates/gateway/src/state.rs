use std::collections::{HashMap, HashSet};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use tokio::sync::{watch, Notify};

use livewatch::client::{ClientError, Session, StreamEvent, StreamHandle};
use livewatch::persistence::{self, FileHeader, Speed};
use livewatch::queue::DataQueue;
use livewatch::wire::{DataKind, DataMessage, ErrorCode};
use livewatch::{Record, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkState {
    Connected,
    Lost,
    Replay,
}

impl LinkState {
    pub fn as_str(self) -> &'static str {
        match self {
            LinkState::Connected => "connected",
            LinkState::Lost => "lost",
            LinkState::Replay => "replay",
        }
    }
}

struct AgentEntry {
    id: String,
    address: String,
    state: LinkState,
    session: Option<Arc<Session>>,
    events: Option<Record>,
}

struct ReplaySource {
    path: PathBuf,
    speed: Speed,
    started: bool,
    cancel: Arc<AtomicBool>,
}

enum Source {
    Live(Arc<StreamHandle>),
    Replay(ReplaySource),
}

struct GStream {
    agent_id: String,
    event: String,
    query: String,
    upstream: String,
    source: Source,
}

#[derive(Clone)]
pub(crate) enum Filter {
    All,
    Ids(HashSet<String>),
}

impl Filter {
    fn matches(&self, gid: &str) -> bool {
        match self {
            Filter::All => true,
            Filter::Ids(ids) => ids.contains(gid),
        }
    }
}

/// One WebSocket client's bounded queue.
pub(crate) struct WsSub {
    filter: Filter,
    pub(crate) queue: Arc<DataQueue>,
    pub(crate) wake: Arc<Notify>,
}

#[derive(Default)]
struct Tables {
    agents: Vec<AgentEntry>,
    streams: HashMap<String, GStream>,
    /// gid → (agent_id, upstream stream id); kept after close for late payloads.
    meta: HashMap<String, (String, String)>,
    subs: Vec<Arc<WsSub>>,
    next_agent: u64,
    next_stream: u64,
    next_replay: u64,
}

/// Failure of an API operation, mapped to an HTTP status by the router.
#[derive(Debug)]
pub enum ApiFailure {
    BadRequest(String),
    UnknownAgent(String),
    UnknownStream(String),
    Unreachable(String),
    Rejected { code: ErrorCode, message: String },
}

/// Agent and stream tables shared by every connection.
pub struct Shared {
    tables: Mutex<Tables>,
    retry: Duration,
    ws_capacity: usize,
    stopped: watch::Receiver<bool>,
}

/// Drops a session off-thread: its receive threads may be waiting on the
/// tables lock held by the caller.
fn retire(session: Option<Arc<Session>>) {
    if let Some(s) = session {
        std::thread::spawn(move || drop(s));
    }
}

fn strings<'a>(it: impl IntoIterator<Item = &'a str>) -> Value {
    Value::List(it.into_iter().map(Value::from).collect())
}

impl Shared {
    pub(crate) fn new(retry: Duration, ws_capacity: usize, stopped: watch::Receiver<bool>) -> Self {
        Shared { tables: Mutex::new(Tables::default()), retry, ws_capacity, stopped }
    }

    pub(crate) fn stopped(&self) -> watch::Receiver<bool> {
        self.stopped.clone()
    }

    /// Registers an agent, tries to connect once and starts its link supervisor.
    pub async fn add_agent(self: &Arc<Self>, address: String) -> (String, LinkState) {
        let id = {
            let mut t = self.tables.lock();
            t.next_agent += 1;
            let id = format!("a{}", t.next_agent);
            t.agents.push(AgentEntry { id: id.clone(), address: address.clone(), state: LinkState::Lost, session: None, events: None });
            id
        };
        let state = self.check_link(&id).await;
        let me = self.clone();
        let link = id.clone();
        let mut stopped = self.stopped();
        tokio::spawn(async move {
            loop {
                tokio::select! {
                    _ = tokio::time::sleep(me.retry) => {}
                    _ = stopped.wait_for(|s| *s) => return,
                }
                me.check_link(&link).await;
            }
        });
        (id, state)
    }

    /// Reconnects a lost link or health-checks a live one, refreshing the
    /// events cache either way.
    async fn check_link(&self, id: &str) -> LinkState {
        let (address, session) = {
            let t = self.tables.lock();
            let Some(a) = t.agents.iter().find(|a| a.id == id) else { return LinkState::Lost };
            (a.address.clone(), a.session.clone())
        };
        let probe = tokio::task::spawn_blocking(move || -> Result<(Arc<Session>, Record), ClientError> {
            let session = match session {
                Some(s) if s.is_connected() => s,
                _ => Arc::new(Session::open(address.as_str())?),
            };
            let events = session.list_events()?;
            Ok((session, events))
        })
        .await;
        let mut t = self.tables.lock();
        let Some(a) = t.agents.iter_mut().find(|a| a.id == id) else { return LinkState::Lost };
        match probe {
            Ok(Ok((session, events))) => {
                if a.state != LinkState::Connected {
                    log::info!("agent {} connected at {}", a.id, a.address);
                }
                a.session = Some(session);
                a.events = Some(events);
                a.state = LinkState::Connected;
            }
            Ok(Err(e)) => {
                if a.state == LinkState::Connected {
                    log::warn!("agent {} lost: {e}", a.id);
                }
                retire(a.session.take());
                a.state = LinkState::Lost;
            }
            Err(e) => log::error!("link check for {id} failed: {e}"),
        }
        a.state
    }

    pub fn agents(&self) -> Value {
        let t = self.tables.lock();
        Value::List(
            t.agents
                .iter()
                .map(|a| {
                    Value::record([
                        ("agent_id", Value::from(a.id.as_str())),
                        ("address", Value::from(a.address.as_str())),
                        ("state", Value::from(a.state.as_str())),
                    ])
                })
                .collect(),
        )
    }

    pub fn agent_state(&self, id: &str) -> Option<LinkState> {
        self.tables.lock().agents.iter().find(|a| a.id == id).map(|a| a.state)
    }

    fn session_for(&self, id: &str) -> Result<Arc<Session>, ApiFailure> {
        let t = self.tables.lock();
        let a = t.agents.iter().find(|a| a.id == id).ok_or_else(|| ApiFailure::UnknownAgent(id.to_owned()))?;
        match (&a.state, &a.session) {
            (LinkState::Replay, _) => Err(ApiFailure::BadRequest(format!("{id} is a replay source"))),
            (LinkState::Connected, Some(s)) => Ok(s.clone()),
            _ => Err(ApiFailure::Unreachable(format!("agent {id} is not connected"))),
        }
    }

    fn client_failure(&self, agent_id: &str, e: ClientError) -> ApiFailure {
        match e {
            ClientError::Rejected { code, message } => ApiFailure::Rejected { code, message },
            other => {
                let mut t = self.tables.lock();
                if let Some(a) = t.agents.iter_mut().find(|a| a.id == agent_id) {
                    a.state = LinkState::Lost;
                    retire(a.session.take());
                }
                ApiFailure::Unreachable(format!("agent {agent_id}: {other}"))
            }
        }
    }

    pub async fn events(&self, agent_id: &str) -> Result<Record, ApiFailure> {
        {
            let t = self.tables.lock();
            let a = t.agents.iter().find(|a| a.id == agent_id).ok_or_else(|| ApiFailure::UnknownAgent(agent_id.to_owned()))?;
            if a.state == LinkState::Replay {
                return Ok(a.events.clone().unwrap_or_default());
            }
        }
        let session = self.session_for(agent_id)?;
        match tokio::task::spawn_blocking(move || session.list_events()).await {
            Ok(Ok(events)) => {
                let mut t = self.tables.lock();
                if let Some(a) = t.agents.iter_mut().find(|a| a.id == agent_id) {
                    a.events = Some(events.clone());
                }
                Ok(events)
            }
            Ok(Err(e)) => Err(self.client_failure(agent_id, e)),
            Err(e) => Err(ApiFailure::Unreachable(e.to_string())),
        }
    }

    fn next_gid(&self) -> String {
        let mut t = self.tables.lock();
        t.next_stream += 1;
        format!("g{}", t.next_stream)
    }

    pub async fn create_stream(self: &Arc<Self>, agent_id: &str, event: &str, query: &str) -> Result<Record, ApiFailure> {
        let session = self.session_for(agent_id)?;
        let gid = self.next_gid();
        let forward = {
            let me = Arc::downgrade(self);
            let gid = gid.clone();
            move |ev: StreamEvent<'_>| {
                let Some(me) = me.upgrade() else { return };
                match ev {
                    StreamEvent::Message(m) => me.forward(&gid, m),
                    StreamEvent::Disconnected => me.upstream_gone(&gid),
                }
            }
        };
        let (ev, q) = (event.to_owned(), query.to_owned());
        let created = tokio::task::spawn_blocking(move || session.create_stream_callback(&ev, &q, None, forward)).await;
        let handle = match created {
            Ok(Ok(h)) => h,
            Ok(Err(e)) => return Err(self.client_failure(agent_id, e)),
            Err(e) => return Err(ApiFailure::Unreachable(e.to_string())),
        };
        let upstream = handle.id().to_owned();
        let mut t = self.tables.lock();
        t.meta.insert(gid.clone(), (agent_id.to_owned(), upstream.clone()));
        t.streams.insert(
            gid.clone(),
            GStream {
                agent_id: agent_id.to_owned(),
                event: event.to_owned(),
                query: query.to_owned(),
                upstream: upstream.clone(),
                source: Source::Live(Arc::new(handle)),
            },
        );
        let mut r = Record::new();
        r.insert("gstream_id".into(), Value::from(gid.as_str()));
        r.insert("agent_id".into(), Value::from(agent_id));
        r.insert("stream_id".into(), Value::from(upstream.as_str()));
        Ok(r)
    }

    pub fn streams(&self) -> Value {
        let t = self.tables.lock();
        let mut rows: Vec<_> = t.streams.iter().collect();
        rows.sort_by_key(|(gid, _)| gid[1..].parse::<u64>().unwrap_or(u64::MAX));
        Value::List(
            rows.into_iter()
                .map(|(gid, s)| {
                    Value::record([
                        ("gstream_id", Value::from(gid.as_str())),
                        ("agent_id", Value::from(s.agent_id.as_str())),
                        ("stream_id", Value::from(s.upstream.as_str())),
                        ("event", Value::from(s.event.as_str())),
                        ("query", Value::from(s.query.as_str())),
                    ])
                })
                .collect(),
        )
    }

    /// Closes a gateway stream and its upstream source.
    pub async fn close_stream(&self, gid: &str) -> Result<(), ApiFailure> {
        let stream = self.tables.lock().streams.remove(gid).ok_or_else(|| ApiFailure::UnknownStream(gid.to_owned()))?;
        match stream.source {
            Source::Live(handle) => {
                let closed = tokio::task::spawn_blocking(move || handle.close()).await;
                match closed {
                    Ok(Ok(())) | Ok(Err(ClientError::Rejected { code: ErrorCode::UnknownStream, .. })) => Ok(()),
                    Ok(Err(e)) => Err(self.client_failure(&stream.agent_id, e)),
                    Err(e) => Err(ApiFailure::Unreachable(e.to_string())),
                }
            }
            Source::Replay(r) => {
                r.cancel.store(true, Ordering::SeqCst);
                if !r.started {
                    self.forward(gid, &DataMessage::closed(stream.upstream, 0, livewatch::agent::now_seconds()));
                }
                Ok(())
            }
        }
    }

    pub async fn set_observable(&self, agent_id: &str, name: &str, value: Value, at_event: Option<String>) -> Result<(), ApiFailure> {
        let session = self.session_for(agent_id)?;
        let name = name.to_owned();
        match tokio::task::spawn_blocking(move || session.set_observable(&name, value, at_event.as_deref())).await {
            Ok(Ok(())) => Ok(()),
            Ok(Err(e)) => Err(self.client_failure(agent_id, e)),
            Err(e) => Err(ApiFailure::Unreachable(e.to_string())),
        }
    }

    /// Registers a stream file as a `replay:N` pseudo-agent with one stream.
    pub fn add_replay(self: &Arc<Self>, path: PathBuf, speed: Speed) -> Result<Record, ApiFailure> {
        let header: FileHeader = persistence::replay(&path, speed)
            .map_err(|e| ApiFailure::BadRequest(format!("{}: {e}", path.display())))?
            .header()
            .clone();
        let gid = self.next_gid();
        let (agent_id, start) = {
            let mut t = self.tables.lock();
            t.next_replay += 1;
            let agent_id = format!("replay:{}", t.next_replay);
            let events = Record::from_iter([
                ("events".to_owned(), strings([header.event.as_str()])),
                ("observables".to_owned(), Value::List(vec![])),
                ("writable".to_owned(), Value::List(vec![])),
            ]);
            t.agents.push(AgentEntry {
                id: agent_id.clone(),
                address: path.display().to_string(),
                state: LinkState::Replay,
                session: None,
                events: Some(events),
            });
            t.meta.insert(gid.clone(), (agent_id.clone(), String::new()));
            t.streams.insert(
                gid.clone(),
                GStream {
                    agent_id: agent_id.clone(),
                    event: header.event.clone(),
                    query: header.query.clone(),
                    upstream: String::new(),
                    source: Source::Replay(ReplaySource { path, speed, started: false, cancel: Arc::new(AtomicBool::new(false)) }),
                },
            );
            let start = t.subs.iter().any(|s| s.filter.matches(&gid));
            (agent_id, start)
        };
        if start {
            self.start_replay(&gid);
        }
        let mut r = Record::new();
        r.insert("agent_id".into(), Value::from(agent_id.as_str()));
        r.insert("gstream_id".into(), Value::from(gid.as_str()));
        r.insert("event".into(), Value::from(header.event.as_str()));
        r.insert("query".into(), Value::from(header.query.as_str()));
        Ok(r)
    }

    fn start_replay(self: &Arc<Self>, gid: &str) {
        let (path, speed, cancel) = {
            let mut t = self.tables.lock();
            let Some(GStream { source: Source::Replay(r), .. }) = t.streams.get_mut(gid) else { return };
            if r.started {
                return;
            }
            r.started = true;
            (r.path.clone(), r.speed, r.cancel.clone())
        };
        let me = self.clone();
        let gid = gid.to_owned();
        std::thread::spawn(move || {
            let mut last: Option<DataMessage> = None;
            match persistence::replay(&path, speed) {
                Ok(replay) => {
                    for m in replay {
                        if cancel.load(Ordering::SeqCst) {
                            break;
                        }
                        match m {
                            Ok(m) => {
                                if let Some((_, upstream)) = me.tables.lock().meta.get_mut(&gid) {
                                    upstream.clone_from(&m.stream);
                                }
                                me.forward(&gid, &m);
                                last = Some(m);
                            }
                            Err(e) => {
                                log::warn!("replay {}: {e}", path.display());
                                break;
                            }
                        }
                    }
                }
                Err(e) => log::warn!("replay {}: {e}", path.display()),
            }
            // Files cut short still end their gateway stream.
            if last.as_ref().is_none_or(|m| m.kind != DataKind::Closed) {
                let (stream, seq) = last.map_or((String::new(), 0), |m| (m.stream, m.seq + 1));
                me.forward(&gid, &DataMessage::closed(stream, seq, livewatch::agent::now_seconds()));
            }
        });
    }

    /// Delivers `msg` to every WebSocket client subscribed to `gid`.
    pub(crate) fn forward(&self, gid: &str, msg: &DataMessage) {
        let mut t = self.tables.lock();
        let mut routed = msg.clone();
        routed.stream = gid.to_owned();
        t.subs.retain(|s| !s.queue.is_closed());
        for s in t.subs.iter().filter(|s| s.filter.matches(gid)) {
            s.queue.push(routed.clone());
            s.wake.notify_one();
        }
        if msg.kind == DataKind::Closed {
            t.streams.remove(gid);
        }
    }

    fn upstream_gone(&self, gid: &str) {
        log::warn!("gateway stream {gid}: agent connection lost");
        self.tables.lock().streams.remove(gid);
    }

    pub(crate) fn subscribe(self: &Arc<Self>, filter: Filter) -> Arc<WsSub> {
        let sub = Arc::new(WsSub { filter, queue: Arc::new(DataQueue::new(self.ws_capacity)), wake: Arc::new(Notify::new()) });
        let pending: Vec<String> = {
            let mut t = self.tables.lock();
            t.subs.push(sub.clone());
            t.streams
                .iter()
                .filter(|(gid, s)| matches!(&s.source, Source::Replay(r) if !r.started) && sub.filter.matches(gid))
                .map(|(gid, _)| gid.clone())
                .collect()
        };
        for gid in pending {
            self.start_replay(&gid);
        }
        sub
    }

    /// WebSocket payload: the data message with its upstream stream id plus
    /// `agent_id` and `gstream_id`.
    pub(crate) fn payload(&self, routed: &DataMessage) -> Record {
        let gid = routed.stream.clone();
        let (agent_id, upstream) = self.tables.lock().meta.get(&gid).cloned().unwrap_or_default();
        let mut m = routed.clone();
        m.stream = upstream;
        let mut r = m.to_record();
        r.insert("agent_id".into(), Value::from(agent_id));
        r.insert("gstream_id".into(), Value::from(gid));
        r
    }

    /// Closes every upstream stream and disconnects WebSocket clients.
    pub(crate) async fn close_all(&self) {
        let gids: Vec<String> = self.tables.lock().streams.keys().cloned().collect();
        for gid in gids {
            let _ = self.close_stream(&gid).await;
        }
        let sessions: Vec<_> = {
            let mut t = self.tables.lock();
            for s in t.subs.drain(..) {
                s.queue.close();
                s.wake.notify_one();
            }
            t.agents.iter_mut().filter_map(|a| a.session.take()).collect()
        };
        let _ = tokio::task::spawn_blocking(move || drop(sessions)).await;
    }
}
