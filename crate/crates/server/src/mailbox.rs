use std::sync::{Condvar, Mutex};

/// Single-slot handoff that always holds the most recent item.
///
/// Posting into an occupied slot returns the displaced item so the caller can
/// answer it. Once closed, posts are refused and waiters drain whatever is
/// left before seeing `None`.
#[derive(Debug)]
pub struct Mailbox<T> {
    state: Mutex<State<T>>,
    ready: Condvar,
}

#[derive(Debug)]
struct State<T> {
    slot: Option<T>,
    closed: bool,
}

impl<T> Default for Mailbox<T> {
    fn default() -> Self {
        Mailbox {
            state: Mutex::new(State {
                slot: None,
                closed: false,
            }),
            ready: Condvar::new(),
        }
    }
}

impl<T> Mailbox<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores `item`, returning the one it replaced. After `close` the item is
    /// handed back as the error.
    pub fn post(&self, item: T) -> Result<Option<T>, T> {
        let mut state = self.state.lock().expect("mailbox lock poisoned");
        if state.closed {
            return Err(item);
        }
        let old = state.slot.replace(item);
        self.ready.notify_one();
        Ok(old)
    }

    /// Blocks until an item is available or the mailbox is closed and empty.
    pub fn wait(&self) -> Option<T> {
        let mut state = self.state.lock().expect("mailbox lock poisoned");
        loop {
            if let Some(item) = state.slot.take() {
                return Some(item);
            }
            if state.closed {
                return None;
            }
            state = self.ready.wait(state).expect("mailbox lock poisoned");
        }
    }

    pub fn close(&self) {
        self.state.lock().expect("mailbox lock poisoned").closed = true;
        self.ready.notify_all();
    }
}
