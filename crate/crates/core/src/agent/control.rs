use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use parking_lot::Mutex;

use super::publish::Publisher;
use crate::dsl::{self, FieldNeeds, Pipeline};
use crate::value::Value;
use crate::wire::{ErrorCode, WireMessage};

/// Work handed from the control path to the host thread.
#[derive(Debug)]
pub(crate) enum Command {
    AddStream { id: String, event: String, pipeline: Pipeline },
    CloseStream { id: String },
    Set { name: String, value: Value, at_event: Option<String> },
}

impl Command {
    fn runs_at(&self, event: Option<&str>) -> bool {
        match self {
            Command::Set { at_event: Some(at), .. } => event == Some(at.as_str()),
            _ => true,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct StreamInfo {
    pub event: String,
    pub query: String,
}

/// What the control path can see without touching host data.
#[derive(Debug, Default)]
pub(crate) struct Catalog {
    /// name → writable
    pub observables: BTreeMap<String, bool>,
    pub events: BTreeSet<String>,
    pub streams: BTreeMap<String, StreamInfo>,
}

#[derive(Debug)]
pub(crate) struct Shared {
    pub catalog: Mutex<Catalog>,
    commands: Mutex<VecDeque<Command>>,
    has_commands: AtomicBool,
    next_stream: AtomicU64,
    pub publisher: Publisher,
}

impl Shared {
    pub(crate) fn new(queue_capacity: usize) -> Self {
        Shared {
            catalog: Mutex::new(Catalog::default()),
            commands: Mutex::new(VecDeque::new()),
            has_commands: AtomicBool::new(false),
            next_stream: AtomicU64::new(1),
            publisher: Publisher::new(queue_capacity),
        }
    }

    fn enqueue(&self, cmd: Command) {
        let mut q = self.commands.lock();
        q.push_back(cmd);
        self.has_commands.store(true, Ordering::Release);
    }

    #[inline]
    pub(crate) fn has_commands(&self) -> bool {
        self.has_commands.load(Ordering::Acquire)
    }

    /// Removes, in arrival order, every queued command eligible at `event`
    /// (`None` = idle safe point, where event-bound sets stay queued).
    pub(crate) fn take_commands(&self, event: Option<&str>) -> Vec<Command> {
        let mut q = self.commands.lock();
        let mut ready = Vec::new();
        let mut keep = VecDeque::new();
        for cmd in q.drain(..) {
            if cmd.runs_at(event) {
                ready.push(cmd);
            } else {
                keep.push_back(cmd);
            }
        }
        *q = keep;
        self.has_commands.store(!q.is_empty(), Ordering::Release);
        ready
    }

    pub(crate) fn handle_control(&self, request: WireMessage) -> WireMessage {
        match request {
            WireMessage::CreateStream { event, query, stream_id } => self.create_stream(event, query, stream_id),
            WireMessage::CloseStream { stream_id } => {
                let mut cat = self.catalog.lock();
                if cat.streams.remove(&stream_id).is_none() {
                    return WireMessage::error(ErrorCode::UnknownStream, format!("no stream '{stream_id}'"));
                }
                self.enqueue(Command::CloseStream { id: stream_id });
                WireMessage::ok()
            }
            WireMessage::ListEvents => {
                let cat = self.catalog.lock();
                let strings = |it: &mut dyn Iterator<Item = &String>| Value::List(it.map(|s| Value::Str(s.clone())).collect());
                WireMessage::ok_with([
                    ("events", strings(&mut cat.events.iter())),
                    ("observables", strings(&mut cat.observables.keys())),
                    ("writable", strings(&mut cat.observables.iter().filter(|(_, w)| **w).map(|(k, _)| k))),
                ])
            }
            WireMessage::ListStreams => {
                let cat = self.catalog.lock();
                let streams = cat
                    .streams
                    .iter()
                    .map(|(id, info)| {
                        Value::record([
                            ("stream_id", Value::Str(id.clone())),
                            ("event", Value::Str(info.event.clone())),
                            ("query", Value::Str(info.query.clone())),
                        ])
                    })
                    .collect();
                WireMessage::ok_with([("streams", Value::List(streams))])
            }
            WireMessage::SetObservable { name, value, at_event } => {
                let cat = self.catalog.lock();
                match cat.observables.get(&name) {
                    None => WireMessage::error(ErrorCode::UnknownObservable, format!("no observable '{name}'")),
                    Some(false) => WireMessage::error(ErrorCode::Readonly, format!("observable '{name}' is readonly")),
                    Some(true) => {
                        self.enqueue(Command::Set { name, value, at_event });
                        WireMessage::ok()
                    }
                }
            }
            other => WireMessage::error(ErrorCode::ParseError, format!("not a control request: {}", describe(&other))),
        }
    }

    fn create_stream(&self, event: String, query: String, stream_id: Option<String>) -> WireMessage {
        let pipeline = match dsl::parse(&query) {
            Ok(p) => p,
            Err(e) => return WireMessage::error(ErrorCode::ParseError, e.to_string()),
        };
        let mut cat = self.catalog.lock();
        if !cat.events.contains(&event) {
            return WireMessage::error(ErrorCode::UnknownEvent, format!("no event '{event}'"));
        }
        if let FieldNeeds::Fields(names) = pipeline.needed_fields() {
            let missing: Vec<_> = names.iter().filter(|n| !cat.observables.contains_key(*n)).cloned().collect();
            if !missing.is_empty() {
                return WireMessage::error(ErrorCode::UnknownObservable, format!("unknown observable(s): {}", missing.join(", ")));
            }
        }
        let id = match stream_id {
            Some(id) if id.is_empty() => return WireMessage::error(ErrorCode::Internal, "stream id must not be empty"),
            Some(id) if cat.streams.contains_key(&id) => {
                return WireMessage::error(ErrorCode::Internal, format!("stream id '{id}' already in use"))
            }
            Some(id) => id,
            None => loop {
                let id = format!("s{}", self.next_stream.fetch_add(1, Ordering::Relaxed));
                if !cat.streams.contains_key(&id) {
                    break id;
                }
            },
        };
        cat.streams.insert(id.clone(), StreamInfo { event: event.clone(), query });
        self.enqueue(Command::AddStream { id: id.clone(), event, pipeline });
        WireMessage::ok_with([("stream_id", Value::Str(id))])
    }
}

fn describe(msg: &WireMessage) -> &'static str {
    match msg {
        WireMessage::Hello { .. } => "hello",
        WireMessage::Ok(_) => "ok",
        WireMessage::Error { .. } => "error",
        WireMessage::Subscribe(_) => "subscribe header",
        WireMessage::Data(_) => "data message",
        _ => "request",
    }
}
