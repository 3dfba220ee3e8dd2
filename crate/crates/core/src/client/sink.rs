use std::io::Write;

use crate::wire::{self, DataMessage};

#[derive(Debug, thiserror::Error)]
pub enum SinkError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

/// A consumer attached to a stream handle. Runs on the session's receive
/// context and must not block for long.
pub trait Sink: Send {
    fn deliver(&mut self, msg: &DataMessage) -> Result<(), SinkError>;

    fn name(&self) -> &str {
        "sink"
    }
}

/// Writes every data message as a canonical wire line.
pub struct ConsoleSink<W: Write + Send> {
    out: W,
}

impl ConsoleSink<std::io::Stdout> {
    pub fn stdout() -> Self {
        ConsoleSink { out: std::io::stdout() }
    }
}

impl<W: Write + Send> ConsoleSink<W> {
    pub fn new(out: W) -> Self {
        ConsoleSink { out }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write + Send> Sink for ConsoleSink<W> {
    fn deliver(&mut self, msg: &DataMessage) -> Result<(), SinkError> {
        self.out.write_all(wire::encode_data(msg).as_bytes())?;
        self.out.flush()?;
        Ok(())
    }

    fn name(&self) -> &str {
        "console"
    }
}

/// Hands each message to a closure, e.g. to forward into a gateway.
pub struct ForwardSink<F> {
    name: String,
    forward: F,
}

impl<F> ForwardSink<F>
where
    F: FnMut(&DataMessage) -> Result<(), SinkError> + Send,
{
    pub fn new(name: impl Into<String>, forward: F) -> Self {
        ForwardSink { name: name.into(), forward }
    }
}

impl<F> Sink for ForwardSink<F>
where
    F: FnMut(&DataMessage) -> Result<(), SinkError> + Send,
{
    fn deliver(&mut self, msg: &DataMessage) -> Result<(), SinkError> {
        (self.forward)(msg)
    }

    fn name(&self) -> &str {
        &self.name
    }
}
