//! Run reports in structured and human-readable form.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::process::InstanceState;
use crate::sim::Event;
use crate::txn::{TxnId, TxnStatus};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AssertionResult {
    /// Position of the action in execution order, from 1.
    pub index: usize,
    pub check: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ActionError {
    pub index: usize,
    pub op: String,
    pub error: String,
    /// The action carried `expect_error`.
    pub expected: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TxnReport {
    pub id: TxnId,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// `None` when the coordinator is down at the end of the run.
    pub status: Option<TxnStatus>,
    pub enlisted: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StoreValue {
    pub value: Option<String>,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProcessReport {
    pub index: usize,
    pub process: String,
    pub state: InstanceState,
    pub variables: BTreeMap<String, String>,
    pub history: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub faults: Vec<String>,
    pub fired_faults: Vec<String>,
    pub passed: bool,
    pub assertions: Vec<AssertionResult>,
    pub errors: Vec<ActionError>,
    pub transactions: Vec<TxnReport>,
    pub stores: BTreeMap<String, BTreeMap<String, StoreValue>>,
    pub queues: BTreeMap<String, Vec<String>>,
    pub processes: Vec<ProcessReport>,
    pub variables: BTreeMap<String, String>,
    pub coordinator_up: bool,
    pub coordinator_log: Vec<String>,
    pub events: Vec<Event>,
}

impl RunReport {
    /// The structured document, pretty-printed.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn txn(&self, name: &str) -> Option<&TxnReport> {
        self.transactions.iter().find(|t| t.name.as_deref() == Some(name))
    }

    pub fn value(&self, store: &str, key: &str) -> Option<&str> {
        self.stores.get(store)?.get(key)?.value.as_deref()
    }
}

fn status_name(s: Option<TxnStatus>) -> String {
    match s {
        Some(s) => serde_json::to_value(s)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default(),
        None => "unknown".into(),
    }
}

impl fmt::Display for RunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenario {} (seed {})", self.scenario, self.seed)?;
        if !self.faults.is_empty() {
            writeln!(f, "faults: {}  fired: {}", self.faults.join(", "), self.fired_faults.join(", "))?;
        }
        if !self.coordinator_up {
            writeln!(f, "coordinator: down")?;
        }
        writeln!(f, "transactions:")?;
        for t in &self.transactions {
            let name = t.name.as_deref().unwrap_or("-");
            writeln!(f, "  #{:<3} {:<12} {:<10} [{}]", t.id, name, status_name(t.status), t.enlisted.join(", "))?;
        }
        for (store, entries) in &self.stores {
            writeln!(f, "store {store}:")?;
            for (k, e) in entries {
                match &e.value {
                    Some(v) => writeln!(f, "  {k} = {v:?} (v{})", e.version)?,
                    None => writeln!(f, "  {k} deleted (v{})", e.version)?,
                }
            }
        }
        for (queue, messages) in &self.queues {
            writeln!(f, "queue {queue}: {} message(s)", messages.len())?;
            for m in messages {
                writeln!(f, "  {m}")?;
            }
        }
        for p in &self.processes {
            let state = match &p.state {
                InstanceState::Failed { step, reason } => format!("failed at {step}: {reason}"),
                s => status_like(s),
            };
            writeln!(f, "process {} -> {state} (steps: {})", p.process, p.history.join(", "))?;
        }
        for e in &self.errors {
            let tag = if e.expected { "expected error" } else { "error" };
            writeln!(f, "{tag} at #{} {}: {}", e.index, e.op, e.error)?;
        }
        for a in &self.assertions {
            let mark = if a.passed { "PASS" } else { "FAIL" };
            writeln!(f, "{mark} #{} {} ({})", a.index, a.check, a.detail)?;
        }
        writeln!(f, "{} events, {} log records", self.events.len(), self.coordinator_log.len())?;
        write!(f, "{}", if self.passed { "result: pass" } else { "result: FAIL" })
    }
}

fn status_like(s: &InstanceState) -> String {
    match s {
        InstanceState::Running => "running".into(),
        InstanceState::Completed => "completed".into(),
        InstanceState::Failed { .. } => "failed".into(),
    }
}
