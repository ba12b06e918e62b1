//! Fan-out of event records to stream subscribers.
//!
//! The owner publishes under the write lock, and subscribers take their
//! backlog and their broadcast receiver under the read lock, so every
//! subscriber sees one gap-free sequence.

use std::collections::VecDeque;
use std::sync::{Arc, RwLock};

use homelink_core::EventRecord;
use tokio::sync::broadcast;

const CHANNEL_CAPACITY: usize = 1024;

#[derive(Debug)]
pub struct StreamHub {
    history: RwLock<Vec<EventRecord>>,
    live: broadcast::Sender<EventRecord>,
}

impl StreamHub {
    pub fn new() -> Arc<Self> {
        let (live, _) = broadcast::channel(CHANNEL_CAPACITY);
        Arc::new(Self {
            history: RwLock::new(Vec::new()),
            live,
        })
    }

    pub fn publish(&self, records: &[EventRecord]) {
        let mut history = self.history.write().expect("hub lock poisoned");
        for r in records {
            history.push(r.clone());
            // no receivers is fine
            let _ = self.live.send(r.clone());
        }
    }

    pub fn len(&self) -> usize {
        self.history.read().expect("hub lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records with `seq > after` (all records when `after` is `None`).
    pub fn since(&self, after: Option<u64>) -> Vec<EventRecord> {
        let history = self.history.read().expect("hub lock poisoned");
        let start = after.map_or(0, |seq| (seq + 1) as usize).min(history.len());
        history[start..].to_vec()
    }

    pub fn subscribe(self: &Arc<Self>, after: Option<u64>) -> Subscription {
        let history = self.history.read().expect("hub lock poisoned");
        let rx = self.live.subscribe();
        let start = after.map_or(0, |seq| (seq + 1) as usize).min(history.len());
        Subscription {
            hub: Arc::clone(self),
            rx,
            backlog: history[start..].iter().cloned().collect(),
            next_seq: (history.len() as u64).max(after.map_or(0, |seq| seq + 1)),
        }
    }
}

pub struct Subscription {
    hub: Arc<StreamHub>,
    rx: broadcast::Receiver<EventRecord>,
    backlog: VecDeque<EventRecord>,
    /// Seq of the first record not yet taken from the live channel.
    next_seq: u64,
}

impl Subscription {
    /// Next record in seq order; `None` once the hub is gone.
    pub async fn next(&mut self) -> Option<EventRecord> {
        loop {
            if let Some(r) = self.backlog.pop_front() {
                return Some(r);
            }
            match self.rx.recv().await {
                Ok(r) if r.seq < self.next_seq => continue,
                Ok(r) => {
                    self.next_seq = r.seq + 1;
                    return Some(r);
                }
                Err(broadcast::error::RecvError::Lagged(_)) => {
                    let missed = self.hub.since(self.next_seq.checked_sub(1));
                    if let Some(last) = missed.last() {
                        self.next_seq = last.seq + 1;
                    }
                    self.backlog.extend(missed);
                }
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    }
}
