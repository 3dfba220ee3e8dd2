//! TCP endpoints: a request/response control listener and a publishing data
//! listener. Connection threads never touch host data; they talk to the
//! host thread only through the command queue and subscriber queues.

use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::Mutex;

use super::control::Shared;
use crate::queue::RecvError;
use crate::wire::{self, ErrorCode, WireMessage, PROTO_VERSION};

const HEADER_TIMEOUT: Duration = Duration::from_secs(30);
const WRITE_TIMEOUT: Duration = Duration::from_secs(10);
const IDLE_TICK: Duration = Duration::from_millis(250);

#[derive(Default)]
struct Tracked {
    streams: Vec<TcpStream>,
    threads: Vec<JoinHandle<()>>,
}

pub(crate) struct Server {
    stop: Arc<AtomicBool>,
    control_addr: SocketAddr,
    data_addr: SocketAddr,
    acceptors: Vec<JoinHandle<()>>,
    tracked: Arc<Mutex<Tracked>>,
}

impl Server {
    pub(crate) fn start(shared: Arc<Shared>, control: SocketAddr, data: SocketAddr) -> io::Result<Server> {
        let control_listener = TcpListener::bind(control)?;
        let data_listener = TcpListener::bind(data)?;
        let control_addr = control_listener.local_addr()?;
        let data_addr = data_listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let tracked = Arc::new(Mutex::new(Tracked::default()));

        let data_port = data_addr.port();
        let acceptors = vec![
            spawn_acceptor("livewatch-control", control_listener, stop.clone(), tracked.clone(), {
                let shared = shared.clone();
                move |s| serve_control(s, &shared, data_port)
            })?,
            spawn_acceptor("livewatch-data", data_listener, stop.clone(), tracked.clone(), {
                let stop = stop.clone();
                move |s| serve_data(s, &shared, &stop)
            })?,
        ];
        Ok(Server { stop, control_addr, data_addr, acceptors, tracked })
    }

    pub(crate) fn control_addr(&self) -> SocketAddr {
        self.control_addr
    }

    pub(crate) fn data_addr(&self) -> SocketAddr {
        self.data_addr
    }

    /// Stops accepting, disconnects control clients and joins every thread.
    /// Data connections finish draining their (already closed) queues first.
    pub(crate) fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for addr in [self.control_addr, self.data_addr] {
            // Wake the blocking accept.
            let _ = TcpStream::connect_timeout(&wake_addr(addr), Duration::from_millis(200));
        }
        for h in self.acceptors.drain(..) {
            let _ = h.join();
        }
        let tracked = std::mem::take(&mut *self.tracked.lock());
        for s in &tracked.streams {
            let _ = s.shutdown(std::net::Shutdown::Read);
        }
        for h in tracked.threads {
            let _ = h.join();
        }
    }
}

fn wake_addr(addr: SocketAddr) -> SocketAddr {
    let mut a = addr;
    if a.ip().is_unspecified() {
        a.set_ip(match a {
            SocketAddr::V4(_) => std::net::Ipv4Addr::LOCALHOST.into(),
            SocketAddr::V6(_) => std::net::Ipv6Addr::LOCALHOST.into(),
        });
    }
    a
}

fn spawn_acceptor<F>(
    name: &str,
    listener: TcpListener,
    stop: Arc<AtomicBool>,
    tracked: Arc<Mutex<Tracked>>,
    handler: F,
) -> io::Result<JoinHandle<()>>
where
    F: Fn(TcpStream) -> io::Result<()> + Send + Sync + Clone + 'static,
{
    let conn_name = format!("{name}-conn");
    std::thread::Builder::new().name(name.into()).spawn(move || {
        for conn in listener.incoming() {
            if stop.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = conn else { continue };
            let _ = stream.set_nodelay(true);
            let Ok(clone) = stream.try_clone() else { continue };
            let handler = handler.clone();
            let spawned = std::thread::Builder::new().name(conn_name.clone()).spawn(move || {
                if let Err(e) = handler(stream) {
                    log::debug!("connection ended: {e}");
                }
            });
            if let Ok(h) = spawned {
                let mut t = tracked.lock();
                t.threads.retain(|h| !h.is_finished());
                t.streams.retain(|s| s.peer_addr().is_ok());
                t.streams.push(clone);
                t.threads.push(h);
            }
        }
    })
}

fn write_line(w: &mut impl Write, msg: &WireMessage) -> io::Result<()> {
    w.write_all(wire::encode(msg).as_bytes())
}

fn serve_control(stream: TcpStream, shared: &Shared, data_port: u16) -> io::Result<()> {
    stream.set_write_timeout(Some(WRITE_TIMEOUT))?;
    let mut out = BufWriter::new(stream.try_clone()?);
    write_line(&mut out, &WireMessage::Hello { proto: PROTO_VERSION, data_port: Some(data_port) })?;
    out.flush()?;
    let mut reader = BufReader::new(stream);
    let mut line = Vec::new();
    loop {
        line.clear();
        if reader.read_until(b'\n', &mut line)? == 0 || line.last() != Some(&b'\n') {
            return Ok(());
        }
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let reply = match wire::decode(&line) {
            Ok(req) => shared.handle_control(req),
            Err(e) => WireMessage::error(ErrorCode::ParseError, e.to_string()),
        };
        write_line(&mut out, &reply)?;
        out.flush()?;
    }
}

fn serve_data(stream: TcpStream, shared: &Shared, stop: &AtomicBool) -> io::Result<()> {
    stream.set_write_timeout(Some(WRITE_TIMEOUT))?;
    let mut out = BufWriter::new(stream.try_clone()?);
    write_line(&mut out, &WireMessage::Hello { proto: PROTO_VERSION, data_port: None })?;
    out.flush()?;

    stream.set_read_timeout(Some(HEADER_TIMEOUT))?;
    let mut header = Vec::new();
    BufReader::new(stream.try_clone()?).read_until(b'\n', &mut header)?;
    let filter = match wire::decode(&header) {
        Ok(WireMessage::Subscribe(f)) => f,
        Ok(_) => {
            write_line(&mut out, &WireMessage::error(ErrorCode::ParseError, "expected subscribe header"))?;
            return out.flush();
        }
        Err(e) => {
            write_line(&mut out, &WireMessage::error(ErrorCode::ParseError, e.to_string()))?;
            return out.flush();
        }
    };
    let sub = shared.publisher.subscribe(filter);
    stream.set_read_timeout(None)?;
    // Acknowledge only once registered, so the client can create streams
    // knowing nothing they publish will be missed.
    write_line(&mut out, &WireMessage::ok())?;
    out.flush()?;
    let queue = sub.queue();
    loop {
        match queue.recv_timeout(IDLE_TICK) {
            Ok(msg) => {
                out.write_all(wire::encode_data(&msg).as_bytes())?;
                while let Some(msg) = queue.try_recv() {
                    out.write_all(wire::encode_data(&msg).as_bytes())?;
                }
                out.flush()?;
            }
            Err(RecvError::Closed) => return out.flush(),
            Err(RecvError::Timeout) => {
                if stop.load(Ordering::SeqCst) && queue.is_closed() {
                    return out.flush();
                }
                if peer_gone(&stream) {
                    return Ok(());
                }
            }
        }
    }
}

fn peer_gone(stream: &TcpStream) -> bool {
    if stream.set_nonblocking(true).is_err() {
        return true;
    }
    let mut probe = [0u8; 1];
    let gone = match stream.peek(&mut probe) {
        Ok(0) => true,
        Ok(_) => false,
        Err(e) => e.kind() != io::ErrorKind::WouldBlock,
    };
    let _ = stream.set_nonblocking(false);
    gone
}
