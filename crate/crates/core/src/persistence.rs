//! Stream files: a header line followed by one data-message line per
//! delivered message, flushed line by line so any prefix is readable.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use crate::client::{Sink, SinkError, StreamHandle};
use crate::value::{Record, Value};
use crate::wire::{self, DataMessage, WireMessage};

pub const FORMAT: &str = "twstream";
pub const VERSION: i64 = 1;
pub const EXTENSION: &str = "twstream";

#[derive(Debug, thiserror::Error)]
pub enum PersistError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("malformed line {line_no}: {message}")]
    MalformedLine { line_no: usize, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FileHeader {
    pub event: String,
    pub query: String,
    pub created: f64,
}

impl FileHeader {
    pub fn new(event: impl Into<String>, query: impl Into<String>) -> Self {
        FileHeader { event: event.into(), query: query.into(), created: crate::agent::now_seconds() }
    }

    pub fn to_record(&self) -> Record {
        let mut r = Record::new();
        r.insert("format".into(), Value::from(FORMAT));
        r.insert("version".into(), Value::Int(VERSION));
        r.insert("event".into(), Value::from(self.event.as_str()));
        r.insert("query".into(), Value::from(self.query.as_str()));
        r.insert("created".into(), Value::Float(self.created));
        r
    }

    pub fn from_line(line: &[u8]) -> Result<Self, PersistError> {
        let bad = |m: &str| PersistError::MalformedHeader(m.to_owned());
        let rec = wire::decode_record_line(line).map_err(|e| PersistError::MalformedHeader(e.to_string()))?;
        if rec.get("format").and_then(Value::as_str) != Some(FORMAT) {
            return Err(bad("format is not \"twstream\""));
        }
        match rec.get("version") {
            Some(Value::Int(VERSION)) => {}
            Some(v) => return Err(PersistError::MalformedHeader(format!("unsupported version {v}"))),
            None => return Err(bad("missing version")),
        }
        let text = |k: &str| rec.get(k).and_then(Value::as_str).map(str::to_owned).ok_or_else(|| bad(&format!("missing {k}")));
        let created = rec.get("created").and_then(Value::as_f64).ok_or_else(|| bad("missing created"))?;
        Ok(FileHeader { event: text("event")?, query: text("query")?, created })
    }
}

/// Writes a stream file. Truncates an existing file.
pub struct StreamWriter {
    out: BufWriter<File>,
    lines: u64,
}

impl StreamWriter {
    pub fn create(path: impl AsRef<Path>, header: &FileHeader) -> Result<Self, PersistError> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(wire::encode_record_line(&header.to_record()).as_bytes())?;
        out.flush()?;
        Ok(StreamWriter { out, lines: 0 })
    }

    pub fn write(&mut self, msg: &DataMessage) -> io::Result<()> {
        self.out.write_all(wire::encode_data(msg).as_bytes())?;
        self.out.flush()?;
        self.lines += 1;
        Ok(())
    }

    pub fn lines(&self) -> u64 {
        self.lines
    }
}

#[derive(Debug, Default)]
struct RecorderState {
    lines: AtomicU64,
    failure: Mutex<Option<String>>,
}

/// Observes a recording attached to a stream handle.
#[derive(Debug, Clone)]
pub struct Recorder {
    path: PathBuf,
    state: Arc<RecorderState>,
}

impl Recorder {
    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Body lines written so far.
    pub fn lines(&self) -> u64 {
        self.state.lines.load(Ordering::SeqCst)
    }

    /// Set once the recorder has failed and been detached.
    pub fn failure(&self) -> Option<String> {
        self.state.failure.lock().clone()
    }
}

struct RecorderSink {
    writer: StreamWriter,
    state: Arc<RecorderState>,
    name: String,
}

impl Sink for RecorderSink {
    fn deliver(&mut self, msg: &DataMessage) -> Result<(), SinkError> {
        match self.writer.write(msg) {
            Ok(()) => {
                self.state.lines.fetch_add(1, Ordering::SeqCst);
                Ok(())
            }
            Err(e) => {
                *self.state.failure.lock() = Some(e.to_string());
                Err(SinkError::Io(e))
            }
        }
    }

    fn name(&self) -> &str {
        &self.name
    }
}

/// Starts recording `handle` to `path`. The header is on disk when this
/// returns; only messages received afterwards are recorded.
pub fn record(handle: &StreamHandle, path: impl AsRef<Path>) -> Result<Recorder, PersistError> {
    let path = path.as_ref().to_path_buf();
    let writer = StreamWriter::create(&path, &FileHeader::new(handle.event(), handle.query()))?;
    let state = Arc::new(RecorderState::default());
    handle.attach_sink(Box::new(RecorderSink { writer, state: state.clone(), name: format!("recorder:{}", path.display()) }));
    Ok(Recorder { path, state })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Speed {
    Max,
    Factor(f64),
}

impl FromStr for Speed {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("max") {
            return Ok(Speed::Max);
        }
        match s.parse::<f64>() {
            Ok(f) if f.is_finite() && f > 0.0 => Ok(Speed::Factor(f)),
            _ => Err(format!("speed must be a positive number or \"max\", got '{s}'")),
        }
    }
}

/// Iterator over the body of a stream file. Stops after the first error.
pub struct Replay {
    header: FileHeader,
    reader: BufReader<File>,
    speed: Speed,
    line_no: usize,
    prev: Option<(f64, Instant)>,
    last_seq: Option<u64>,
    done: bool,
}

/// Opens `path` for replay. The header is validated here.
pub fn replay(path: impl AsRef<Path>, speed: Speed) -> Result<Replay, PersistError> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(PersistError::MalformedHeader("missing header line".into()));
    }
    let header = FileHeader::from_line(&line)?;
    Ok(Replay { header, reader, speed, line_no: 1, prev: None, last_seq: None, done: false })
}

impl Replay {
    pub fn header(&self) -> &FileHeader {
        &self.header
    }

    fn malformed(&mut self, message: String) -> PersistError {
        self.done = true;
        PersistError::MalformedLine { line_no: self.line_no, message }
    }

    fn pace(&mut self, t: f64) {
        let Speed::Factor(speed) = self.speed else { return };
        if let Some((prev_t, prev_at)) = self.prev {
            let gap = ((t - prev_t) / speed).max(0.0);
            if gap.is_finite() {
                let due = prev_at + Duration::from_secs_f64(gap);
                let now = Instant::now();
                if due > now {
                    std::thread::sleep(due - now);
                }
            }
        }
        self.prev = Some((t, Instant::now()));
    }
}

impl Iterator for Replay {
    type Item = Result<DataMessage, PersistError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let mut line = Vec::new();
        loop {
            line.clear();
            match self.reader.read_until(b'\n', &mut line) {
                Err(e) => {
                    self.done = true;
                    return Some(Err(e.into()));
                }
                // A partial trailing line is an interrupted append.
                Ok(_) if line.last() != Some(&b'\n') => {
                    self.done = true;
                    return None;
                }
                Ok(_) => self.line_no += 1,
            }
            if !line.iter().all(u8::is_ascii_whitespace) {
                break;
            }
        }
        let msg = match wire::decode(&line) {
            Ok(WireMessage::Data(m)) => m,
            Ok(_) => return Some(Err(self.malformed("not a data message".into()))),
            Err(e) => return Some(Err(self.malformed(e.to_string()))),
        };
        if self.last_seq.is_some_and(|last| msg.seq <= last) {
            return Some(Err(self.malformed(format!("seq {} does not increase", msg.seq))));
        }
        self.last_seq = Some(msg.seq);
        self.pace(msg.t);
        Some(Ok(msg))
    }
}
