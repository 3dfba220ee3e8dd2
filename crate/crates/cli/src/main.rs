mod output;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use livewatch::client::{ClientError, Session, StreamHandle};
use livewatch::dsl::WindowMode;
use livewatch::persistence::{self, FileHeader, Speed, StreamWriter};
use livewatch::trainer::{Trainer, TrainerConfig};
use livewatch::wire::{text, DataKind, DataMessage};
use livewatch::{Agent, AgentConfig, Value};
use livewatch_gateway::GatewayConfig;

use output::{Format, Printer};

const EXIT_OK: u8 = 0;
const EXIT_FAILURE: u8 = 1;
const EXIT_REJECTED: u8 = 2;
const EXIT_UNREACHABLE: u8 = 3;
const EXIT_INTERRUPTED: u8 = 130;

const POLL: Duration = Duration::from_millis(100);

#[derive(Parser)]
#[command(name = "livewatch", version, about = "Query, record and steer long-running processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a stream and print its items until it closes.
    Watch(WatchArgs),
    /// Like watch, also appending every message to a stream file.
    Record(RecordArgs),
    /// Print the items of a stream file, optionally re-recording them.
    Replay(ReplayArgs),
    /// Write an observable.
    Set(SetArgs),
    /// List an agent's events and observables.
    Events(ConnectArgs),
    /// Run a bundled simulator with an embedded agent.
    #[command(subcommand)]
    Sim(SimCommand),
    /// Serve the HTTP/WebSocket gateway.
    Gateway(GatewayArgs),
}

#[derive(Args)]
struct ConnectArgs {
    /// Agent control address.
    #[arg(long, value_name = "HOST:PORT", default_value = "127.0.0.1:7470")]
    connect: String,
}

#[derive(Args)]
struct StreamArgs {
    #[command(flatten)]
    connect: ConnectArgs,
    #[arg(long)]
    event: String,
    #[arg(long)]
    query: String,
    /// group, count=N or seconds=T
    #[arg(long, value_parser = parse_window)]
    window: Option<WindowMode>,
    #[arg(long, value_enum, default_value = "lines")]
    format: Format,
}

#[derive(Args)]
struct WatchArgs {
    #[command(flatten)]
    stream: StreamArgs,
    /// Write formatted items here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RecordArgs {
    #[command(flatten)]
    stream: StreamArgs,
    /// Stream file to create.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    /// Stream file to read.
    path: PathBuf,
    /// Pacing factor relative to recorded time, or `max`.
    #[arg(long, default_value = "max")]
    speed: Speed,
    #[arg(long, value_enum, default_value = "lines")]
    format: Format,
    /// Re-record the replayed messages into a new stream file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SetArgs {
    #[command(flatten)]
    connect: ConnectArgs,
    #[arg(long)]
    name: String,
    /// Canonical-encoded scalar, e.g. 0.001, true or "text".
    #[arg(long, value_parser = parse_scalar)]
    value: Value,
    /// Apply at the next occurrence of this event.
    #[arg(long)]
    at_event: Option<String>,
}

#[derive(Subcommand)]
enum SimCommand {
    /// Train a small MLP on synthetic data, notifying `batch` and `epoch`.
    Trainer(TrainerArgs),
}

#[derive(Args)]
struct TrainerArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    epochs: u32,
    #[arg(long, default_value_t = 50)]
    batches_per_epoch: u32,
    #[arg(long, default_value_t = 32)]
    batch_size: u32,
    /// Comma-separated widths: inputs, hidden layers, then 1.
    #[arg(long, value_delimiter = ',', default_value = "8,16,1")]
    layer_sizes: Vec<usize>,
    #[arg(long, default_value_t = 0.05)]
    learning_rate: f64,
    /// Sleep after each batch.
    #[arg(long, default_value_t = 0)]
    batch_delay_ms: u64,
    /// Control port; 0 picks a free port. Defaults to 7470 or LIVEWATCH_CONTROL_PORT.
    #[arg(long)]
    control_port: Option<u16>,
    /// Data port; 0 picks a free port. Defaults to 7471 or LIVEWATCH_DATA_PORT.
    #[arg(long)]
    data_port: Option<u16>,
    /// Hold training until this many streams are active.
    #[arg(long, default_value_t = 0)]
    wait_streams: usize,
}

#[derive(Args)]
struct GatewayArgs {
    #[arg(long, default_value = "127.0.0.1:7480")]
    listen: SocketAddr,
    /// Agent control address to attach; repeatable.
    #[arg(long = "agent", value_name = "HOST:PORT")]
    agents: Vec<String>,
    /// Agent reconnect and health-check period.
    #[arg(long, default_value_t = 5.0)]
    retry_seconds: f64,
}

fn parse_window(s: &str) -> Result<WindowMode, String> {
    s.parse()
}

fn parse_scalar(s: &str) -> Result<Value, String> {
    match text::decode_value(s) {
        Ok(v @ (Value::Null | Value::Bool(_) | Value::Int(_) | Value::Float(_) | Value::Str(_))) => Ok(v),
        Ok(_) => Err("value must be a scalar".into()),
        Err(e) => Err(format!("not a canonical value ({e}); quote strings as \"text\"")),
    }
}

/// Prints a failure and maps it to an exit code.
fn client_failure(e: &ClientError) -> u8 {
    match e {
        ClientError::Rejected { code, message } => {
            eprintln!("error: {code}: {message}");
            EXIT_REJECTED
        }
        ClientError::ConnectRefused { .. } | ClientError::Disconnected | ClientError::Timeout | ClientError::ProtocolMismatch(_) => {
            eprintln!("error: agent unreachable: {e}");
            EXIT_UNREACHABLE
        }
        other => {
            eprintln!("error: {other}");
            EXIT_FAILURE
        }
    }
}

fn interrupt_flag() -> Arc<AtomicBool> {
    let flag = Arc::new(AtomicBool::new(false));
    let f = flag.clone();
    if let Err(e) = ctrlc::set_handler(move || f.store(true, Ordering::SeqCst)) {
        log::warn!("cannot install interrupt handler: {e}");
    }
    flag
}

fn open_output(path: Option<&Path>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

/// Returns true when the stream is over.
fn show<W: Write>(printer: &mut Printer<W>, m: &DataMessage) -> io::Result<bool> {
    match m.kind {
        DataKind::Item => printer.item(m.seq, m.value.as_ref().unwrap_or(&Value::Null))?,
        DataKind::Error => eprintln!("error at seq {}: {}", m.seq, m.value.as_ref().and_then(Value::as_str).unwrap_or("")),
        DataKind::Dropped => eprintln!("warning: {} items dropped before seq {}", m.count.unwrap_or(0), m.seq),
        DataKind::Closed => return Ok(true),
    }
    Ok(false)
}

fn open_stream(args: &StreamArgs) -> Result<(Session, StreamHandle), u8> {
    let session = Session::open(args.connect.connect.as_str()).map_err(|e| client_failure(&e))?;
    let handle = session.create_stream(&args.event, &args.query, args.window).map_err(|e| client_failure(&e))?;
    Ok((session, handle))
}

fn pump<W: Write>(handle: &StreamHandle, printer: &mut Printer<W>, interrupted: &AtomicBool) -> u8 {
    loop {
        if interrupted.load(Ordering::SeqCst) {
            let _ = handle.close();
            return EXIT_INTERRUPTED;
        }
        match handle.recv_timeout(POLL) {
            Ok(m) => match show(printer, &m) {
                Ok(true) => return EXIT_OK,
                Ok(false) => {}
                Err(e) if e.kind() == io::ErrorKind::BrokenPipe => {
                    let _ = handle.close();
                    return EXIT_OK;
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    return EXIT_FAILURE;
                }
            },
            Err(ClientError::Timeout) => {}
            Err(ClientError::StreamClosed) => return EXIT_OK,
            Err(e) => return client_failure(&e),
        }
    }
}

fn watch(args: WatchArgs) -> u8 {
    let interrupted = interrupt_flag();
    let out = match open_output(args.out.as_deref()) {
        Ok(out) => out,
        Err(e) => {
            eprintln!("error: {}: {e}", args.out.unwrap_or_default().display());
            return EXIT_FAILURE;
        }
    };
    let (_session, handle) = match open_stream(&args.stream) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let mut printer = Printer::new(args.stream.format, out);
    let code = pump(&handle, &mut printer, &interrupted);
    let _ = printer.finish();
    code
}

fn record(args: RecordArgs) -> u8 {
    let interrupted = interrupt_flag();
    let (_session, handle) = match open_stream(&args.stream) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let recorder = match persistence::record(&handle, &args.out) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {}: {e}", args.out.display());
            let _ = handle.close();
            return EXIT_FAILURE;
        }
    };
    let mut printer = Printer::new(args.stream.format, io::stdout().lock());
    let code = pump(&handle, &mut printer, &interrupted);
    let _ = printer.finish();
    if let Some(failure) = recorder.failure() {
        eprintln!("error: recording to {} failed: {failure}", args.out.display());
        return EXIT_FAILURE;
    }
    eprintln!("recorded {} lines to {}", recorder.lines(), args.out.display());
    code
}

fn replay(args: ReplayArgs) -> u8 {
    let interrupted = interrupt_flag();
    let source = match persistence::replay(&args.path, args.speed) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {}: {e}", args.path.display());
            return EXIT_FAILURE;
        }
    };
    let header = FileHeader::new(source.header().event.clone(), source.header().query.clone());
    let mut copy = match &args.out {
        Some(p) => match StreamWriter::create(p, &header) {
            Ok(w) => Some(w),
            Err(e) => {
                eprintln!("error: {}: {e}", p.display());
                return EXIT_FAILURE;
            }
        },
        None => None,
    };
    let mut printer = Printer::new(args.format, io::stdout().lock());
    for m in source {
        if interrupted.load(Ordering::SeqCst) {
            return EXIT_INTERRUPTED;
        }
        let m = match m {
            Ok(m) => m,
            Err(e) => {
                eprintln!("error: {}: {e}", args.path.display());
                return EXIT_FAILURE;
            }
        };
        if let Some(w) = copy.as_mut() {
            if let Err(e) = w.write(&m) {
                eprintln!("error: {}: {e}", args.out.as_deref().unwrap_or(Path::new("")).display());
                return EXIT_FAILURE;
            }
        }
        match show(&mut printer, &m) {
            Ok(true) => break,
            Ok(false) => {}
            Err(e) if e.kind() == io::ErrorKind::BrokenPipe => break,
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_FAILURE;
            }
        }
    }
    let _ = printer.finish();
    EXIT_OK
}

fn set(args: SetArgs) -> u8 {
    let session = match Session::open(args.connect.connect.as_str()) {
        Ok(s) => s,
        Err(e) => return client_failure(&e),
    };
    match session.set_observable(&args.name, args.value, args.at_event.as_deref()) {
        Ok(()) => {
            println!("ok");
            EXIT_OK
        }
        Err(e) => client_failure(&e),
    }
}

fn events(args: ConnectArgs) -> u8 {
    let listed = Session::open(args.connect.as_str()).and_then(|s| s.list_events());
    let listed = match listed {
        Ok(r) => r,
        Err(e) => return client_failure(&e),
    };
    let names = |key: &str| -> Vec<String> {
        match listed.get(key) {
            Some(Value::List(xs)) => xs.iter().filter_map(|x| x.as_str().map(str::to_owned)).collect(),
            _ => Vec::new(),
        }
    };
    let writable = names("writable");
    for e in names("events") {
        println!("event       {e}");
    }
    for o in names("observables") {
        let mode = if writable.contains(&o) { "settable" } else { "read-only" };
        println!("observable  {o}  {mode}");
    }
    EXIT_OK
}

fn sim_trainer(args: TrainerArgs) -> u8 {
    let config = TrainerConfig {
        seed: args.seed,
        epochs: args.epochs,
        batches_per_epoch: args.batches_per_epoch,
        batch_size: args.batch_size,
        layer_sizes: args.layer_sizes,
        learning_rate: args.learning_rate,
        batch_delay: Duration::from_millis(args.batch_delay_ms),
    };
    let trainer = match Trainer::new(config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_FAILURE;
        }
    };
    let mut agent_config = match AgentConfig::default().with_env_overrides() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_FAILURE;
        }
    };
    if let Some(p) = args.control_port {
        agent_config.control_port = p;
    }
    if let Some(p) = args.data_port {
        agent_config.data_port = p;
    }
    let mut agent = match Agent::serve(agent_config) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_FAILURE;
        }
    };
    if let Err(e) = trainer.instrument(&mut agent) {
        eprintln!("error: {e}");
        return EXIT_FAILURE;
    }
    let (control, data) = (agent.control_addr().unwrap(), agent.data_addr().unwrap());
    println!("LIVEWATCH listening control={} data={}", control.port(), data.port());
    let _ = io::stdout().flush();
    while agent.active_streams() < args.wait_streams {
        agent.poll();
        std::thread::sleep(Duration::from_millis(10));
    }
    let summary = trainer.run(Some(&mut agent));
    agent.shutdown();
    let last = summary.epoch_losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "LIVEWATCH done epochs={} batches={} stopped={} final_epoch_loss={}",
        summary.epochs_completed,
        summary.batches_run,
        summary.stopped,
        text::encode_value(&Value::Float(last))
    );
    EXIT_OK
}

fn gateway(args: GatewayArgs) -> u8 {
    if !(args.retry_seconds.is_finite() && args.retry_seconds > 0.0) {
        eprintln!("error: --retry-seconds must be positive");
        return EXIT_FAILURE;
    }
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_FAILURE;
        }
    };
    let config = GatewayConfig {
        listen: args.listen,
        agents: args.agents,
        retry: Duration::from_secs_f64(args.retry_seconds),
        ..Default::default()
    };
    let (tx, mut interrupted) = tokio::sync::mpsc::unbounded_channel();
    if let Err(e) = ctrlc::set_handler(move || {
        let _ = tx.send(());
    }) {
        log::warn!("cannot install interrupt handler: {e}");
    }
    runtime.block_on(async move {
        let running = match livewatch_gateway::start(config).await {
            Ok(r) => r,
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_FAILURE;
            }
        };
        println!("LIVEWATCH gateway listening on {}", running.addr());
        let _ = io::stdout().flush();
        interrupted.recv().await;
        running.shutdown().await;
        EXIT_INTERRUPTED
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { EXIT_FAILURE } else { EXIT_OK });
        }
    };
    let code = match cli.command {
        Command::Watch(a) => watch(a),
        Command::Record(a) => record(a),
        Command::Replay(a) => replay(a),
        Command::Set(a) => set(a),
        Command::Events(a) => events(a),
        Command::Sim(SimCommand::Trainer(a)) => sim_trainer(a),
        Command::Gateway(a) => gateway(a),
    };
    ExitCode::from(code)
}
