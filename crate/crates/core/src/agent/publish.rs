use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;

use crate::queue::{DataQueue, RecvError};
use crate::wire::{DataMessage, Subscription};

#[derive(Debug)]
struct Slot {
    filter: Subscription,
    queue: Arc<DataQueue>,
}

/// Fans data messages out to per-subscriber bounded queues.
#[derive(Debug)]
pub(crate) struct Publisher {
    slots: Mutex<Vec<Slot>>,
    capacity: usize,
}

impl Publisher {
    pub(crate) fn new(capacity: usize) -> Self {
        Publisher { slots: Mutex::new(Vec::new()), capacity }
    }

    pub(crate) fn subscribe(&self, filter: Subscription) -> Subscriber {
        let queue = Arc::new(DataQueue::new(self.capacity));
        self.slots.lock().push(Slot { filter, queue: queue.clone() });
        Subscriber { queue }
    }

    pub(crate) fn publish(&self, msg: &DataMessage) {
        let mut slots = self.slots.lock();
        slots.retain(|s| !s.queue.is_closed());
        for s in slots.iter().filter(|s| s.filter.matches(&msg.stream)) {
            s.queue.push(msg.clone());
        }
    }

    pub(crate) fn close_all(&self) {
        for s in self.slots.lock().drain(..) {
            s.queue.close();
        }
    }
}

/// An in-process consumer of agent data messages.
///
/// Dropping the subscriber detaches it from the agent.
#[derive(Debug)]
pub struct Subscriber {
    queue: Arc<DataQueue>,
}

impl Subscriber {
    pub fn try_recv(&self) -> Option<DataMessage> {
        self.queue.try_recv()
    }

    pub fn recv(&self) -> Result<DataMessage, RecvError> {
        self.queue.recv()
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Result<DataMessage, RecvError> {
        self.queue.recv_timeout(timeout)
    }

    /// Everything queued right now.
    pub fn drain(&self) -> Vec<DataMessage> {
        std::iter::from_fn(|| self.queue.try_recv()).collect()
    }

    pub fn total_dropped(&self) -> u64 {
        self.queue.total_dropped()
    }

    pub(crate) fn queue(&self) -> &Arc<DataQueue> {
        &self.queue
    }
}

impl Drop for Subscriber {
    fn drop(&mut self) {
        self.queue.close();
    }
}
