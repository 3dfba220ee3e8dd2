//! The in-process agent embedded in the host.
//!
//! The host registers observables (lazy getters, optionally setters) and
//! calls [`Agent::notify`] at every event. Clients create streams through
//! the control path; the agent evaluates them at the matching events and
//! publishes results to subscribers.
//!
//! All stream-table changes and observable writes are queued and applied at
//! the start of the next `notify` (or [`Agent::poll`]), so the host thread
//! never races with the network. With no active stream on an event, a
//! notify costs one atomic load and one map lookup and pulls nothing.

mod control;
mod net;
mod publish;

use std::collections::{BTreeSet, HashMap};
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use indexmap::IndexMap;

pub use publish::Subscriber;

use crate::dsl::FieldNeeds;
use crate::engine::{Output, StreamItem, StreamProcessor};
use crate::queue::DEFAULT_CAPACITY;
use crate::value::{Record, Value};
use crate::wire::{DataMessage, Subscription, WireMessage};
use control::{Command, Shared};

pub const CONTROL_PORT_ENV: &str = "LIVEWATCH_CONTROL_PORT";
pub const DATA_PORT_ENV: &str = "LIVEWATCH_DATA_PORT";

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("observable '{0}' is already registered")]
    DuplicateName(String),
    #[error("observable names must be non-empty")]
    EmptyName,
    #[error("invalid port in {var}: '{value}'")]
    BadPortEnv { var: &'static str, value: String },
    #[error("failed to bind agent endpoints: {0}")]
    Bind(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub bind: IpAddr,
    pub control_port: u16,
    pub data_port: u16,
    /// Per-subscriber queue bound.
    pub queue_capacity: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig { bind: IpAddr::V4(Ipv4Addr::LOCALHOST), control_port: 7470, data_port: 7471, queue_capacity: DEFAULT_CAPACITY }
    }
}

impl AgentConfig {
    /// Ephemeral ports on localhost.
    pub fn ephemeral() -> Self {
        AgentConfig { control_port: 0, data_port: 0, ..Default::default() }
    }

    /// Applies `LIVEWATCH_CONTROL_PORT` / `LIVEWATCH_DATA_PORT` when set.
    pub fn with_env_overrides(mut self) -> Result<Self, AgentError> {
        for (var, port) in [(CONTROL_PORT_ENV, &mut self.control_port), (DATA_PORT_ENV, &mut self.data_port)] {
            if let Ok(value) = std::env::var(var) {
                *port = value.trim().parse().map_err(|_| AgentError::BadPortEnv { var, value })?;
            }
        }
        Ok(self)
    }
}

type Getter = Box<dyn Fn() -> Value + Send>;
type Setter = Box<dyn FnMut(Value) -> Result<(), String> + Send>;

struct Observable {
    getter: Getter,
    setter: Option<Setter>,
    pulls: u64,
}

struct ActiveStream {
    id: String,
    processor: StreamProcessor,
    needs: FieldNeeds,
    next_seq: u64,
}

impl ActiveStream {
    fn publish(&mut self, shared: &Shared, out: Output, t: f64) {
        let msg = match out {
            Output::Silent => return,
            Output::Emit(v) => DataMessage::item(&*self.id, self.next_seq, t, v),
            Output::Error(e) => DataMessage::error(&*self.id, self.next_seq, t, e.message),
        };
        self.next_seq += 1;
        shared.publisher.publish(&msg);
    }

    fn close(mut self, shared: &Shared, t: f64) {
        let out = self.processor.flush();
        self.publish(shared, out, t);
        shared.publisher.publish(&DataMessage::closed(&*self.id, self.next_seq, t));
    }
}

enum Pull {
    All,
    Names(Vec<String>),
}

struct EventStreams {
    streams: Vec<ActiveStream>,
    pull: Pull,
}

impl EventStreams {
    fn new() -> Self {
        EventStreams { streams: Vec::new(), pull: Pull::Names(Vec::new()) }
    }

    fn recompute_pull(&mut self) {
        let mut names = BTreeSet::new();
        for s in &self.streams {
            match &s.needs {
                FieldNeeds::All => {
                    self.pull = Pull::All;
                    return;
                }
                FieldNeeds::Fields(f) => names.extend(f.iter().cloned()),
            }
        }
        self.pull = Pull::Names(names.into_iter().collect());
    }
}

pub fn now_seconds() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Cloneable control-path handle, usable from any thread.
#[derive(Clone)]
pub struct Controller {
    shared: Arc<Shared>,
}

impl Controller {
    /// Answers one control request. Mutations take effect at the host's next safe point.
    pub fn handle_control(&self, request: WireMessage) -> WireMessage {
        self.shared.handle_control(request)
    }

    pub fn subscribe(&self, filter: Subscription) -> Subscriber {
        self.shared.publisher.subscribe(filter)
    }
}

pub struct Agent {
    observables: IndexMap<String, Observable>,
    events: HashMap<String, EventStreams>,
    shared: Arc<Shared>,
    server: Option<net::Server>,
    events_seen: u64,
    shut_down: bool,
}

impl Agent {
    /// An agent without network endpoints; drive it through [`Agent::controller`].
    pub fn in_process() -> Self {
        Self::with_shared(Arc::new(Shared::new(DEFAULT_CAPACITY)))
    }

    fn with_shared(shared: Arc<Shared>) -> Self {
        Agent {
            observables: IndexMap::new(),
            events: HashMap::new(),
            shared,
            server: None,
            events_seen: 0,
            shut_down: false,
        }
    }

    /// Starts the control and data listeners. Port environment variables
    /// override the configured ports.
    pub fn serve(config: AgentConfig) -> Result<Self, AgentError> {
        let config = config.with_env_overrides()?;
        let shared = Arc::new(Shared::new(config.queue_capacity));
        let server = net::Server::start(
            shared.clone(),
            SocketAddr::new(config.bind, config.control_port),
            SocketAddr::new(config.bind, config.data_port),
        )?;
        let mut agent = Self::with_shared(shared);
        agent.server = Some(server);
        Ok(agent)
    }

    pub fn control_addr(&self) -> Option<SocketAddr> {
        self.server.as_ref().map(net::Server::control_addr)
    }

    pub fn data_addr(&self) -> Option<SocketAddr> {
        self.server.as_ref().map(net::Server::data_addr)
    }

    pub fn controller(&self) -> Controller {
        Controller { shared: self.shared.clone() }
    }

    pub fn handle_control(&self, request: WireMessage) -> WireMessage {
        self.shared.handle_control(request)
    }

    pub fn subscribe(&self, filter: Subscription) -> Subscriber {
        self.shared.publisher.subscribe(filter)
    }

    fn insert(&mut self, name: &str, getter: Getter, setter: Option<Setter>) -> Result<(), AgentError> {
        if name.is_empty() {
            return Err(AgentError::EmptyName);
        }
        if self.observables.contains_key(name) {
            return Err(AgentError::DuplicateName(name.to_owned()));
        }
        self.shared.catalog.lock().observables.insert(name.to_owned(), setter.is_some());
        self.observables.insert(name.to_owned(), Observable { getter, setter, pulls: 0 });
        Ok(())
    }

    /// Registers a read-only observable. The getter is not called here.
    pub fn register_observable<G>(&mut self, name: &str, getter: G) -> Result<(), AgentError>
    where
        G: Fn() -> Value + Send + 'static,
    {
        self.insert(name, Box::new(getter), None)
    }

    /// Registers an observable clients may write with `set_observable`.
    /// A setter error is logged; the client has already been acknowledged.
    pub fn register_settable<G, S>(&mut self, name: &str, getter: G, setter: S) -> Result<(), AgentError>
    where
        G: Fn() -> Value + Send + 'static,
        S: FnMut(Value) -> Result<(), String> + Send + 'static,
    {
        self.insert(name, Box::new(getter), Some(Box::new(setter)))
    }

    /// Makes an event known before it first fires, so clients can attach to it early.
    pub fn declare_event(&mut self, event: &str) {
        if !self.events.contains_key(event) {
            self.events.insert(event.to_owned(), EventStreams::new());
            self.shared.catalog.lock().events.insert(event.to_owned());
        }
    }

    pub fn pull_count(&self, name: &str) -> Option<u64> {
        self.observables.get(name).map(|o| o.pulls)
    }

    pub fn total_pulls(&self) -> u64 {
        self.observables.values().map(|o| o.pulls).sum()
    }

    pub fn active_streams(&self) -> usize {
        self.events.values().map(|e| e.streams.len()).sum()
    }

    /// Host event hook. Must be called from one thread at a time.
    pub fn notify(&mut self, event: &str, group_end: bool) {
        if self.shared.has_commands() {
            self.apply_commands(Some(event));
        }
        let Some(entry) = self.events.get_mut(event) else {
            self.declare_event(event);
            return;
        };
        if entry.streams.is_empty() {
            return;
        }
        let mut record = Record::new();
        match &entry.pull {
            Pull::All => {
                for (name, obs) in self.observables.iter_mut() {
                    obs.pulls += 1;
                    record.insert(name.clone(), (obs.getter)());
                }
            }
            Pull::Names(names) => {
                for name in names {
                    if let Some(obs) = self.observables.get_mut(name) {
                        obs.pulls += 1;
                        record.insert(name.clone(), (obs.getter)());
                    }
                }
            }
        }
        let t = now_seconds();
        let item = StreamItem { value: Value::Record(record), group_end, seq: self.events_seen, t_wall: t };
        self.events_seen += 1;
        for stream in &mut entry.streams {
            let out = stream.processor.post(&item);
            stream.publish(&self.shared, out, t);
        }
    }

    /// Applies queued control changes outside of any event. Event-bound
    /// observable writes stay queued until their event fires.
    pub fn poll(&mut self) {
        if self.shared.has_commands() {
            self.apply_commands(None);
        }
    }

    fn apply_commands(&mut self, event: Option<&str>) {
        for cmd in self.shared.take_commands(event) {
            match cmd {
                Command::AddStream { id, event, pipeline } => {
                    let stream = ActiveStream {
                        id,
                        processor: StreamProcessor::new(&pipeline),
                        needs: pipeline.needed_fields(),
                        next_seq: 0,
                    };
                    let entry = self.events.entry(event).or_insert_with(EventStreams::new);
                    entry.streams.push(stream);
                    entry.recompute_pull();
                }
                Command::CloseStream { id } => {
                    for entry in self.events.values_mut() {
                        if let Some(pos) = entry.streams.iter().position(|s| s.id == id) {
                            entry.streams.remove(pos).close(&self.shared, now_seconds());
                            entry.recompute_pull();
                            break;
                        }
                    }
                }
                Command::Set { name, value, .. } => {
                    if let Some(setter) = self.observables.get_mut(&name).and_then(|o| o.setter.as_mut()) {
                        if let Err(e) = setter(value) {
                            log::warn!("set_observable '{name}' rejected by host: {e}");
                        }
                    }
                }
            }
        }
    }

    /// Closes every stream (flushing partial windows), disconnects clients
    /// and stops the listeners. Called on drop.
    pub fn shutdown(&mut self) {
        if self.shut_down {
            return;
        }
        self.shut_down = true;
        self.poll();
        let t = now_seconds();
        for entry in self.events.values_mut() {
            for stream in entry.streams.drain(..) {
                self.shared.catalog.lock().streams.remove(&stream.id);
                stream.close(&self.shared, t);
            }
            entry.recompute_pull();
        }
        self.shared.publisher.close_all();
        if let Some(server) = self.server.take() {
            server.shutdown();
        }
    }
}

impl Drop for Agent {
    fn drop(&mut self) {
        self.shutdown();
    }
}
