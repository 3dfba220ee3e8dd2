//! Client library for talking to an agent over TCP.
//!
//! A [`Session`] holds one control connection. Each stream gets its own data
//! connection subscribed to that stream only, read by a dedicated thread.
//! Stream ids are chosen client-side and subscribed before the create
//! request is sent, so no item can be published before its handle exists.

mod sink;

use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::Mutex;

pub use sink::{ConsoleSink, ForwardSink, Sink, SinkError};

use crate::dsl::WindowMode;
use crate::queue::{DataQueue, RecvError, DEFAULT_CAPACITY};
use crate::value::{Record, Value};
use crate::wire::{self, DataKind, DataMessage, ErrorCode, Subscription, WireMessage, PROTO_VERSION};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);
const REPLY_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("cannot connect to {addr}: {source}")]
    ConnectRefused { addr: String, source: io::Error },
    #[error("peer speaks protocol {0}, expected {PROTO_VERSION}")]
    ProtocolMismatch(i64),
    #[error("connection to agent lost")]
    Disconnected,
    #[error("{code}: {message}")]
    Rejected { code: ErrorCode, message: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("stream closed")]
    StreamClosed,
    #[error("timed out")]
    Timeout,
}

impl ClientError {
    /// The agent error code when the agent rejected a request.
    pub fn code(&self) -> Option<ErrorCode> {
        match self {
            ClientError::Rejected { code, .. } => Some(*code),
            _ => None,
        }
    }
}

/// What a callback-mode handle sees.
#[derive(Debug)]
pub enum StreamEvent<'a> {
    Message(&'a DataMessage),
    Disconnected,
}

type Callback = Box<dyn FnMut(StreamEvent<'_>) + Send>;

enum Delivery {
    Callback(Callback),
    Queue(Arc<DataQueue>),
}

struct SinkSlot {
    sink: Box<dyn Sink>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum End {
    Open,
    Closed,
    Disconnected,
}

struct RouteState {
    delivery: Delivery,
    sinks: Vec<SinkSlot>,
    sink_errors: Vec<String>,
    last_seq: Option<u64>,
    unexplained_gaps: u64,
    foreign: u64,
    end: End,
}

struct Route {
    state: Mutex<RouteState>,
}

impl Route {
    fn deliver(&self, msg: &DataMessage) {
        let mut st = self.state.lock();
        if st.end != End::Open {
            return;
        }
        if let Some(last) = st.last_seq {
            if msg.seq <= last {
                log::warn!("stream {}: seq {} not after {last}", msg.stream, msg.seq);
            } else if msg.seq > last + 1 && msg.kind != DataKind::Dropped {
                st.unexplained_gaps += 1;
                log::warn!("stream {}: gap {last} -> {} without dropped notice", msg.stream, msg.seq);
            }
        }
        st.last_seq = Some(st.last_seq.map_or(msg.seq, |l| l.max(msg.seq)));

        let mut failed = Vec::new();
        for (i, slot) in st.sinks.iter_mut().enumerate() {
            if let Err(e) = slot.sink.deliver(msg) {
                failed.push((i, format!("{}: {e}", slot.sink.name())));
            }
        }
        for (i, err) in failed.into_iter().rev() {
            log::warn!("detaching failed sink {err}");
            st.sinks.remove(i);
            st.sink_errors.push(err);
        }
        match &mut st.delivery {
            Delivery::Callback(f) => f(StreamEvent::Message(msg)),
            Delivery::Queue(q) => {
                q.push(msg.clone());
            }
        }
        if msg.kind == DataKind::Closed {
            st.end = End::Closed;
            if let Delivery::Queue(q) = &st.delivery {
                q.close();
            }
        }
    }

    fn disconnect(&self) {
        let mut st = self.state.lock();
        if st.end != End::Open {
            return;
        }
        st.end = End::Disconnected;
        match &mut st.delivery {
            Delivery::Callback(f) => f(StreamEvent::Disconnected),
            Delivery::Queue(q) => q.close(),
        }
    }
}

struct Control {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

struct DataConn {
    socket: TcpStream,
    thread: JoinHandle<()>,
}

struct Inner {
    control: Mutex<Control>,
    data_addr: SocketAddr,
    data_conns: Mutex<Vec<DataConn>>,
    connected: AtomicBool,
    prefix: String,
    counter: AtomicU64,
}

impl Inner {
    fn request(&self, msg: &WireMessage) -> Result<WireMessage, ClientError> {
        if !self.connected.load(Ordering::SeqCst) {
            return Err(ClientError::Disconnected);
        }
        let mut ctl = self.control.lock();
        let result = (|| {
            ctl.writer.write_all(wire::encode(msg).as_bytes())?;
            ctl.writer.flush()?;
            let mut line = Vec::new();
            if ctl.reader.read_until(b'\n', &mut line)? == 0 {
                return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "control connection closed"));
            }
            Ok(line)
        })();
        let line = match result {
            Ok(l) => l,
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                return Err(ClientError::Timeout)
            }
            Err(_) => {
                self.connected.store(false, Ordering::SeqCst);
                return Err(ClientError::Disconnected);
            }
        };
        match wire::decode(&line) {
            Ok(WireMessage::Error { code, message }) => Err(ClientError::Rejected { code, message }),
            Ok(reply) => Ok(reply),
            Err(e) => Err(ClientError::Protocol(e.to_string())),
        }
    }

    fn request_ok(&self, msg: &WireMessage) -> Result<Record, ClientError> {
        match self.request(msg)? {
            WireMessage::Ok(r) => Ok(r),
            other => Err(ClientError::Protocol(format!("unexpected reply {other:?}"))),
        }
    }

    /// Opens a data connection subscribed to `stream_id` and waits for the
    /// agent to confirm the subscription.
    fn subscribe(&self, stream_id: &str) -> Result<(TcpStream, BufReader<TcpStream>), ClientError> {
        let mut data = connect(self.data_addr)?;
        data.set_read_timeout(Some(CONNECT_TIMEOUT)).ok();
        let mut reader = BufReader::new(data.try_clone().map_err(|_| ClientError::Disconnected)?);
        read_hello(&mut reader)?;
        let header = WireMessage::Subscribe(Subscription::Streams(vec![stream_id.to_owned()]));
        data.write_all(wire::encode(&header).as_bytes()).map_err(|_| ClientError::Disconnected)?;
        match read_message(&mut reader)? {
            WireMessage::Ok(_) => {}
            WireMessage::Error { code, message } => return Err(ClientError::Rejected { code, message }),
            other => return Err(ClientError::Protocol(format!("expected subscription ack, got {other:?}"))),
        }
        data.set_read_timeout(None).ok();
        Ok((data, reader))
    }
}

fn read_message(reader: &mut impl BufRead) -> Result<WireMessage, ClientError> {
    let mut line = Vec::new();
    match reader.read_until(b'\n', &mut line) {
        Ok(0) | Err(_) => return Err(ClientError::Disconnected),
        Ok(_) => {}
    }
    wire::decode(&line).map_err(|e| ClientError::Protocol(e.to_string()))
}

fn read_hello(reader: &mut impl BufRead) -> Result<Option<u16>, ClientError> {
    match read_message(reader)? {
        WireMessage::Hello { proto, data_port } if proto == PROTO_VERSION => Ok(data_port),
        WireMessage::Hello { proto, .. } => Err(ClientError::ProtocolMismatch(proto)),
        other => Err(ClientError::Protocol(format!("expected hello, got {other:?}"))),
    }
}

fn connect(addr: SocketAddr) -> Result<TcpStream, ClientError> {
    let s = TcpStream::connect_timeout(&addr, CONNECT_TIMEOUT)
        .map_err(|source| ClientError::ConnectRefused { addr: addr.to_string(), source })?;
    let _ = s.set_nodelay(true);
    Ok(s)
}

fn resolve(addr: impl ToSocketAddrs) -> Result<SocketAddr, ClientError> {
    addr.to_socket_addrs()
        .map_err(|source| ClientError::ConnectRefused { addr: "<unresolved>".into(), source })?
        .next()
        .ok_or_else(|| ClientError::ConnectRefused {
            addr: "<unresolved>".into(),
            source: io::Error::new(io::ErrorKind::NotFound, "address resolved to nothing"),
        })
}

/// A connection to one agent: a control channel plus one data connection
/// per stream, each subscribed to that stream only.
pub struct Session {
    inner: Arc<Inner>,
}

impl Session {
    /// Connects to an agent's control endpoint; the data endpoint is taken
    /// from the agent's hello line.
    pub fn open(addr: impl ToSocketAddrs) -> Result<Session, ClientError> {
        Self::open_with(addr, None)
    }

    /// Like [`Session::open`], with an explicit data address.
    pub fn open_with(addr: impl ToSocketAddrs, data_addr: Option<SocketAddr>) -> Result<Session, ClientError> {
        let control_addr = resolve(addr)?;
        let control = connect(control_addr)?;
        control.set_read_timeout(Some(CONNECT_TIMEOUT)).ok();
        let mut reader = BufReader::new(control.try_clone().map_err(|_| ClientError::Disconnected)?);
        let advertised = read_hello(&mut reader)?;
        control.set_read_timeout(Some(REPLY_TIMEOUT)).ok();

        let data_addr = match (data_addr, advertised) {
            (Some(a), _) => a,
            (None, Some(port)) => SocketAddr::new(control_addr.ip(), port),
            (None, None) => return Err(ClientError::Protocol("agent did not advertise a data port".into())),
        };
        let uuid = uuid::Uuid::new_v4().simple().to_string();
        let inner = Arc::new(Inner {
            control: Mutex::new(Control { reader, writer: control }),
            data_addr,
            data_conns: Mutex::new(Vec::new()),
            connected: AtomicBool::new(true),
            prefix: format!("c{}", &uuid[..8]),
            counter: AtomicU64::new(0),
        });
        Ok(Session { inner })
    }

    /// False once the control connection has failed.
    pub fn is_connected(&self) -> bool {
        self.inner.connected.load(Ordering::SeqCst)
    }

    fn create(&self, event: &str, query: &str, window: Option<WindowMode>, delivery: Delivery) -> Result<StreamHandle, ClientError> {
        let query = match window {
            Some(w) => format!("{query} | window({w})"),
            None => query.to_owned(),
        };
        let n = self.inner.counter.fetch_add(1, Ordering::Relaxed) + 1;
        let id = format!("{}-{n}", self.inner.prefix);
        let (socket, reader) = self.inner.subscribe(&id)?;
        let req = WireMessage::CreateStream { event: event.into(), query: query.clone(), stream_id: Some(id.clone()) };
        let reply = match self.inner.request_ok(&req) {
            Ok(r) => r,
            Err(e) => {
                let _ = socket.shutdown(std::net::Shutdown::Both);
                return Err(e);
            }
        };
        if let Some(assigned) = reply.get("stream_id").and_then(Value::as_str) {
            if assigned != id {
                let _ = socket.shutdown(std::net::Shutdown::Both);
                return Err(ClientError::Protocol(format!("agent assigned '{assigned}', requested '{id}'")));
            }
        }
        let route = Arc::new(Route {
            state: Mutex::new(RouteState {
                delivery,
                sinks: Vec::new(),
                sink_errors: Vec::new(),
                last_seq: None,
                unexplained_gaps: 0,
                foreign: 0,
                end: End::Open,
            }),
        });
        let thread = {
            let route = route.clone();
            let id = id.clone();
            std::thread::Builder::new()
                .name(format!("livewatch-{id}"))
                .spawn(move || receive_loop(&id, &route, reader))
                .map_err(|_| ClientError::Disconnected)?
        };
        let mut conns = self.inner.data_conns.lock();
        conns.retain(|c| !c.thread.is_finished());
        conns.push(DataConn { socket: socket.try_clone().map_err(|_| ClientError::Disconnected)?, thread });
        Ok(StreamHandle { id, event: event.into(), query, inner: self.inner.clone(), route })
    }

    /// Creates a stream delivered through a bounded blocking queue
    /// (drop-oldest with a `dropped` notice on overflow).
    pub fn create_stream(&self, event: &str, query: &str, window: Option<WindowMode>) -> Result<StreamHandle, ClientError> {
        self.create_stream_with_capacity(event, query, window, DEFAULT_CAPACITY)
    }

    pub fn create_stream_with_capacity(
        &self,
        event: &str,
        query: &str,
        window: Option<WindowMode>,
        capacity: usize,
    ) -> Result<StreamHandle, ClientError> {
        self.create(event, query, window, Delivery::Queue(Arc::new(DataQueue::new(capacity))))
    }

    /// Creates a stream whose messages are handed to `callback` on the
    /// stream's receive thread.
    pub fn create_stream_callback<F>(
        &self,
        event: &str,
        query: &str,
        window: Option<WindowMode>,
        callback: F,
    ) -> Result<StreamHandle, ClientError>
    where
        F: FnMut(StreamEvent<'_>) + Send + 'static,
    {
        self.create(event, query, window, Delivery::Callback(Box::new(callback)))
    }

    /// Takes effect at the agent's next matching event.
    pub fn set_observable(&self, name: &str, value: Value, at_event: Option<&str>) -> Result<(), ClientError> {
        let req = WireMessage::SetObservable { name: name.into(), value, at_event: at_event.map(Into::into) };
        self.inner.request_ok(&req).map(drop)
    }

    pub fn list_events(&self) -> Result<Record, ClientError> {
        self.inner.request_ok(&WireMessage::ListEvents)
    }

    pub fn list_streams(&self) -> Result<Record, ClientError> {
        self.inner.request_ok(&WireMessage::ListStreams)
    }

    /// Sends a raw control request.
    pub fn request(&self, msg: &WireMessage) -> Result<WireMessage, ClientError> {
        self.inner.request(msg)
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        let _ = self.inner.control.lock().writer.shutdown(std::net::Shutdown::Both);
        let conns = std::mem::take(&mut *self.inner.data_conns.lock());
        for c in &conns {
            let _ = c.socket.shutdown(std::net::Shutdown::Both);
        }
        let me = std::thread::current().id();
        // A callback may drop the last session reference on its own thread.
        for c in conns.into_iter().filter(|c| c.thread.thread().id() != me) {
            let _ = c.thread.join();
        }
    }
}

fn receive_loop(id: &str, route: &Route, mut reader: BufReader<TcpStream>) {
    let mut line = Vec::new();
    loop {
        line.clear();
        match reader.read_until(b'\n', &mut line) {
            Ok(0) | Err(_) => break,
            Ok(_) if line.last() != Some(&b'\n') => break,
            Ok(_) => {}
        }
        let msg = match wire::decode(&line) {
            Ok(WireMessage::Data(m)) if m.stream == id => m,
            Ok(WireMessage::Data(m)) => {
                log::warn!("data for stream {} on connection for {id}", m.stream);
                route.state.lock().foreign += 1;
                continue;
            }
            Ok(other) => {
                log::warn!("unexpected message on data channel for {id}: {other:?}");
                continue;
            }
            Err(e) => {
                log::warn!("undecodable data line: {e}");
                continue;
            }
        };
        route.deliver(&msg);
        if msg.kind == DataKind::Closed {
            return;
        }
    }
    route.disconnect();
}

/// Client-side view of one stream.
pub struct StreamHandle {
    id: String,
    event: String,
    query: String,
    inner: Arc<Inner>,
    route: Arc<Route>,
}

impl StreamHandle {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn event(&self) -> &str {
        &self.event
    }

    pub fn query(&self) -> &str {
        &self.query
    }

    pub fn last_seen_seq(&self) -> Option<u64> {
        self.route.state.lock().last_seq
    }

    /// Seq jumps not covered by a `dropped` notice. Always 0 for a healthy agent.
    pub fn unexplained_gaps(&self) -> u64 {
        self.route.state.lock().unexplained_gaps
    }

    /// Data messages for other streams seen on this stream's connection
    /// (and discarded). Always 0 for a healthy agent.
    pub fn foreign_messages(&self) -> u64 {
        self.route.state.lock().foreign
    }

    /// Attaches a sink; it sees only messages received from now on.
    pub fn attach_sink(&self, sink: Box<dyn Sink>) {
        self.route.state.lock().sinks.push(SinkSlot { sink });
    }

    /// Errors of sinks that failed and were detached, one entry per sink.
    pub fn sink_errors(&self) -> Vec<String> {
        self.route.state.lock().sink_errors.clone()
    }

    fn queue(&self) -> Option<Arc<DataQueue>> {
        match &self.route.state.lock().delivery {
            Delivery::Queue(q) => Some(q.clone()),
            Delivery::Callback(_) => None,
        }
    }

    fn end_error(&self) -> ClientError {
        match self.route.state.lock().end {
            End::Disconnected => ClientError::Disconnected,
            _ => ClientError::StreamClosed,
        }
    }

    /// Blocks for the next message. The terminal `closed` message is
    /// returned once; after that this yields `StreamClosed`.
    pub fn recv(&self) -> Result<DataMessage, ClientError> {
        let q = self.queue().ok_or_else(|| ClientError::Protocol("handle uses callback delivery".into()))?;
        q.recv().map_err(|_| self.end_error())
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Result<DataMessage, ClientError> {
        let q = self.queue().ok_or_else(|| ClientError::Protocol("handle uses callback delivery".into()))?;
        match q.recv_timeout(timeout) {
            Ok(m) => Ok(m),
            Err(RecvError::Timeout) => Err(ClientError::Timeout),
            Err(RecvError::Closed) => Err(self.end_error()),
        }
    }

    pub fn try_recv(&self) -> Option<DataMessage> {
        self.queue()?.try_recv()
    }

    /// Asks the agent to close the stream. The `closed` message follows on the data channel.
    pub fn close(&self) -> Result<(), ClientError> {
        self.inner.request_ok(&WireMessage::CloseStream { stream_id: self.id.clone() }).map(drop)
    }
}
