//! Bounded data-message queue with drop-oldest overflow.
//!
//! When full, the oldest message is discarded (terminal `closed` messages
//! are kept) and a `dropped` notice carrying the number of lost messages is
//! delivered ahead of anything else for that stream. The notice reuses the
//! seq of the last lost message, so per-stream seq stays strictly increasing
//! and every gap is explained.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use parking_lot::{Condvar, Mutex};

use crate::wire::{DataKind, DataMessage};

pub const DEFAULT_CAPACITY: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecvError {
    Timeout,
    /// The queue was closed and is drained.
    Closed,
}

#[derive(Debug, Default)]
struct Lost {
    count: u64,
    seq: u64,
    t: f64,
}

#[derive(Debug)]
struct Inner {
    buf: VecDeque<DataMessage>,
    lost: IndexMap<String, Lost>,
    closed: bool,
    total_dropped: u64,
}

#[derive(Debug)]
pub struct DataQueue {
    inner: Mutex<Inner>,
    ready: Condvar,
    capacity: usize,
}

impl DataQueue {
    pub fn new(capacity: usize) -> Self {
        DataQueue {
            inner: Mutex::new(Inner { buf: VecDeque::new(), lost: IndexMap::new(), closed: false, total_dropped: 0 }),
            ready: Condvar::new(),
            capacity: capacity.max(1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Enqueues `msg`. Returns `false` if the queue is closed.
    pub fn push(&self, msg: DataMessage) -> bool {
        let mut g = self.inner.lock();
        if g.closed {
            return false;
        }
        if g.buf.len() >= self.capacity {
            let victim = g.buf.iter().position(|m| m.kind != DataKind::Closed).unwrap_or(0);
            if let Some(old) = g.buf.remove(victim) {
                let n = if old.kind == DataKind::Dropped { old.count.unwrap_or(0) } else { 1 };
                g.total_dropped += n;
                let lost = g.lost.entry(old.stream).or_default();
                lost.count += n;
                lost.seq = lost.seq.max(old.seq);
                lost.t = old.t;
            }
        }
        g.buf.push_back(msg);
        drop(g);
        self.ready.notify_one();
        true
    }

    fn take(g: &mut Inner) -> Option<DataMessage> {
        if let Some((stream, lost)) = g.lost.shift_remove_index(0) {
            return Some(DataMessage::dropped(stream, lost.seq, lost.t, lost.count));
        }
        g.buf.pop_front()
    }

    pub fn try_recv(&self) -> Option<DataMessage> {
        Self::take(&mut self.inner.lock())
    }

    pub fn recv(&self) -> Result<DataMessage, RecvError> {
        let mut g = self.inner.lock();
        loop {
            if let Some(m) = Self::take(&mut g) {
                return Ok(m);
            }
            if g.closed {
                return Err(RecvError::Closed);
            }
            self.ready.wait(&mut g);
        }
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Result<DataMessage, RecvError> {
        let deadline = Instant::now() + timeout;
        let mut g = self.inner.lock();
        loop {
            if let Some(m) = Self::take(&mut g) {
                return Ok(m);
            }
            if g.closed {
                return Err(RecvError::Closed);
            }
            if self.ready.wait_until(&mut g, deadline).timed_out() {
                return Self::take(&mut g).ok_or(RecvError::Timeout);
            }
        }
    }

    /// Stops accepting messages; receivers drain what is left, then see `Closed`.
    pub fn close(&self) {
        self.inner.lock().closed = true;
        self.ready.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.inner.lock().closed
    }

    pub fn len(&self) -> usize {
        let g = self.inner.lock();
        g.buf.len() + g.lost.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Messages discarded by overflow since creation.
    pub fn total_dropped(&self) -> u64 {
        self.inner.lock().total_dropped
    }
}
