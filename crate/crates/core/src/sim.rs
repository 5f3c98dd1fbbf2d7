//! Simulated clock and ordered event trace shared by every participant of a
//! run.
//!
//! Time is an integer counter. Every recorded event advances it by one unit;
//! simulated latencies (endpoint delays, prepare timeouts) advance it by their
//! own amount. Nothing here reads the wall clock, so a single-threaded driver
//! gets a reproducible trace.

use std::sync::{Arc, Mutex, MutexGuard};

use serde::Serialize;

use crate::rm::Vote;
use crate::txn::TxnId;

/// Outcome an individual resource manager applied for a transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Applied {
    Committed,
    RolledBack,
    /// Volatile workspace discarded by a crash before the participant voted.
    Lost,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    /// Coordinator log record, exactly as written to the log device.
    LogWrite { record: String },
    /// Resource-manager-local log record (`PREPARED` or `DONE`).
    RmLogWrite { rm: String, txn: TxnId, record: String },
    Prepare { txn: TxnId, rm: String },
    Vote { txn: TxnId, rm: String, vote: Vote },
    PrepareTimeout { txn: TxnId, rm: String },
    PrepareFailed { txn: TxnId, rm: String, reason: String },
    CommitRequest { txn: TxnId, rm: String },
    RollbackRequest { txn: TxnId, rm: String },
    /// A phase-two message could not be delivered; the coordinator retries on
    /// recovery.
    Phase2Deferred { txn: TxnId, rm: String, reason: String },
    Outcome { txn: TxnId, rm: String, applied: Applied },
    Crash { target: String },
    Restart { target: String },
    FaultFired { target: String, point: String },
    Send { queue: String, txn: TxnId, message: String },
    Receive { queue: String, txn: TxnId, message: Option<String> },
    ServiceCall { component: String, service: String, txn: Option<TxnId> },
    LegacyCall { service: String, call: String, endpoint: String, latency: u64, ok: bool },
    BrokerInvoke { service: String, ok: bool },
    ProcessStep { process: String, step: String },
    ActionFailed { index: usize, op: String, error: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Event {
    pub at: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug)]
struct TraceState {
    now: u64,
    enabled: bool,
    events: Vec<Event>,
}

/// Shared handle to the run's clock and event log.
#[derive(Debug, Clone)]
pub struct Trace {
    state: Arc<Mutex<TraceState>>,
}

impl Default for Trace {
    fn default() -> Self {
        Trace::with_recording(true)
    }
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    /// A trace that keeps the clock but discards events.
    pub fn disabled() -> Self {
        Trace::with_recording(false)
    }

    fn with_recording(enabled: bool) -> Self {
        Trace {
            state: Arc::new(Mutex::new(TraceState {
                now: 0,
                enabled,
                events: Vec::new(),
            })),
        }
    }

    fn lock(&self) -> MutexGuard<'_, TraceState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn record(&self, kind: EventKind) -> u64 {
        let mut state = self.lock();
        state.now += 1;
        let at = state.now;
        if state.enabled {
            state.events.push(Event { at, kind });
        }
        at
    }

    pub fn advance(&self, units: u64) {
        self.lock().now += units;
    }

    pub fn now(&self) -> u64 {
        self.lock().now
    }

    pub fn events(&self) -> Vec<Event> {
        self.lock().events.clone()
    }

    pub fn len(&self) -> usize {
        self.lock().events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
