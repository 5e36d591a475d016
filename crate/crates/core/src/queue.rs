//! Bounded FIFO between pipeline workers, with byte accounting so tests can
//! check how much payload memory the queue ever held.

use std::collections::VecDeque;
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QueueStats {
    pub len: usize,
    pub bytes: usize,
    pub peak_len: usize,
    pub peak_bytes: usize,
    /// Total time producers spent blocked on a full queue.
    pub push_wait: Duration,
}

struct State<T> {
    items: VecDeque<(T, usize)>,
    closed: bool,
    stats: QueueStats,
}

pub struct BoundedQueue<T> {
    capacity: usize,
    state: Mutex<State<T>>,
    not_empty: Condvar,
    not_full: Condvar,
}

#[derive(Debug, PartialEq, Eq)]
pub enum PopTimeout<T> {
    Item(T),
    Closed,
    TimedOut,
}

impl<T> BoundedQueue<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "queue capacity must be at least 1");
        Self {
            capacity,
            state: Mutex::new(State { items: VecDeque::new(), closed: false, stats: QueueStats::default() }),
            not_empty: Condvar::new(),
            not_full: Condvar::new(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, State<T>> {
        self.state.lock().expect("queue lock poisoned")
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Blocks while full. Hands the item back if the queue was closed.
    pub fn push(&self, item: T, bytes: usize) -> Result<(), T> {
        let mut s = self.lock();
        let start = Instant::now();
        while s.items.len() >= self.capacity && !s.closed {
            s = self.not_full.wait(s).expect("queue lock poisoned");
        }
        s.stats.push_wait += start.elapsed();
        if s.closed {
            return Err(item);
        }
        s.items.push_back((item, bytes));
        s.stats.len = s.items.len();
        s.stats.bytes += bytes;
        s.stats.peak_len = s.stats.peak_len.max(s.stats.len);
        s.stats.peak_bytes = s.stats.peak_bytes.max(s.stats.bytes);
        drop(s);
        self.not_empty.notify_one();
        Ok(())
    }

    fn take(&self, s: &mut State<T>) -> Option<T> {
        let (item, bytes) = s.items.pop_front()?;
        s.stats.len = s.items.len();
        s.stats.bytes -= bytes;
        self.not_full.notify_one();
        Some(item)
    }

    /// Blocks while empty. `None` once closed and drained.
    pub fn pop(&self) -> Option<T> {
        let mut s = self.lock();
        loop {
            if let Some(item) = self.take(&mut s) {
                return Some(item);
            }
            if s.closed {
                return None;
            }
            s = self.not_empty.wait(s).expect("queue lock poisoned");
        }
    }

    pub fn pop_timeout(&self, timeout: Duration) -> PopTimeout<T> {
        let deadline = Instant::now() + timeout;
        let mut s = self.lock();
        loop {
            if let Some(item) = self.take(&mut s) {
                return PopTimeout::Item(item);
            }
            if s.closed {
                return PopTimeout::Closed;
            }
            let now = Instant::now();
            if now >= deadline {
                return PopTimeout::TimedOut;
            }
            s = self.not_empty.wait_timeout(s, deadline - now).expect("queue lock poisoned").0;
        }
    }

    /// Wakes all waiters. Queued items can still be popped.
    pub fn close(&self) {
        self.lock().closed = true;
        self.not_empty.notify_all();
        self.not_full.notify_all();
    }

    pub fn stats(&self) -> QueueStats {
        self.lock().stats
    }
}
