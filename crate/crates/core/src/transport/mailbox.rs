use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use super::{RankId, TransportError};

/// Inbound queues of one rank, keyed by `(source, tag)`.
#[derive(Default)]
pub(crate) struct Mailbox {
    inner: Mutex<Inbox>,
    ready: Condvar,
}

#[derive(Default)]
struct Inbox {
    queues: HashMap<(RankId, u32), VecDeque<Vec<f64>>>,
    closed: HashSet<RankId>,
}

impl Mailbox {
    pub(crate) fn push(&self, source: RankId, tag: u32, payload: Vec<f64>) {
        let mut inbox = self.inner.lock().unwrap();
        inbox.queues.entry((source, tag)).or_default().push_back(payload);
        self.ready.notify_all();
    }

    /// Marks `source` as gone. Messages it already delivered stay receivable.
    pub(crate) fn close(&self, source: RankId) {
        self.inner.lock().unwrap().closed.insert(source);
        self.ready.notify_all();
    }

    pub(crate) fn pop(&self, source: RankId, tag: u32, timeout: Duration) -> Result<Vec<f64>, TransportError> {
        let deadline = Instant::now() + timeout;
        let mut inbox = self.inner.lock().unwrap();
        loop {
            if let Some(p) = inbox.queues.get_mut(&(source, tag)).and_then(VecDeque::pop_front) {
                return Ok(p);
            }
            if inbox.closed.contains(&source) {
                return Err(TransportError::Closed { peer: source });
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(TransportError::Timeout {
                    peer: source,
                    tag,
                    after: timeout,
                });
            }
            inbox = self.ready.wait_timeout(inbox, deadline - now).unwrap().0;
        }
    }
}
