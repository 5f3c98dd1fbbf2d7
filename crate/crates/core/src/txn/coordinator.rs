//! Two-phase commit coordinator.
//!
//! Every state change is written to the coordinator log before it is acted
//! on. Recovery uses presumed abort: a transaction with no `COMMIT` record is
//! rolled back everywhere.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::{Arc, Mutex, MutexGuard};

use serde::Serialize;

use super::record::{replay, Decision, LogRecord};
use super::{CrashPoint, FaultSpec, FaultTarget, TxnError, TxnId, TxnStatus};
use crate::log::DurableLog;
use crate::rm::{ResourceManager, UnmanagedResource, Vote};
use crate::sim::{EventKind, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoordinatorConfig {
    /// Simulated time a participant may take to answer prepare before its
    /// vote counts as `No`.
    pub prepare_timeout: u64,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        CoordinatorConfig {
            prepare_timeout: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Committed,
    Aborted,
}

/// Counts produced by one recovery pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RecoveryOutcome {
    /// Transactions with a `COMMIT` but no `END` whose phase two was re-driven.
    pub recommitted: usize,
    /// Undecided transactions that were aborted by presumption.
    pub presumed_aborted: usize,
    /// Transactions with an `ABORT` but no `END` whose rollback was re-driven.
    pub reaborted: usize,
    /// In-doubt participant branches resolved from the participants' side.
    pub in_doubt_resolved: usize,
    /// Transactions still lacking `END` because a participant is unavailable.
    pub pending: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TxnSummary {
    pub id: TxnId,
    pub originator: String,
    pub status: TxnStatus,
    pub enlisted: Vec<String>,
}

#[derive(Debug, Clone)]
struct Entry {
    originator: String,
    status: TxnStatus,
    enlisted: Vec<String>,
    ended: bool,
    /// Replayed from the log without a decision; awaits presumed abort.
    orphan: bool,
}

#[derive(Debug)]
struct ArmedFault {
    spec: FaultSpec,
    fired: bool,
}

struct State {
    up: bool,
    next_id: u64,
    txns: BTreeMap<TxnId, Entry>,
    rms: BTreeMap<String, Arc<dyn ResourceManager>>,
    unmanaged: BTreeSet<String>,
    prepare_latency: BTreeMap<String, u64>,
    faults: Vec<ArmedFault>,
}

impl State {
    fn ensure_up(&self) -> Result<(), TxnError> {
        if self.up {
            Ok(())
        } else {
            Err(TxnError::CoordinatorDown)
        }
    }

    fn active_entry(&mut self, id: TxnId) -> Result<&mut Entry, TxnError> {
        self.ensure_up()?;
        let entry = self.txns.get_mut(&id).ok_or(TxnError::UnknownTxn(id))?;
        if entry.orphan || entry.status != TxnStatus::Active {
            let status = if entry.orphan { TxnStatus::Aborting } else { entry.status };
            return Err(TxnError::NotActive(id, status));
        }
        Ok(entry)
    }
}

struct Inner {
    log: DurableLog,
    trace: Trace,
    config: CoordinatorConfig,
    state: Mutex<State>,
}

/// Shared handle to a transaction coordinator.
#[derive(Clone)]
pub struct Coordinator {
    inner: Arc<Inner>,
}

impl fmt::Debug for Coordinator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let state = self.state();
        f.debug_struct("Coordinator")
            .field("up", &state.up)
            .field("next_id", &state.next_id)
            .field("txns", &state.txns.len())
            .finish()
    }
}

/// A transaction as seen by the components taking part in it. Cheap to
/// clone and hand to other components; the authoritative state lives in the
/// coordinator.
#[derive(Clone)]
pub struct TransactionContext {
    id: TxnId,
    originator: String,
    coordinator: Coordinator,
}

impl fmt::Debug for TransactionContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TransactionContext")
            .field("id", &self.id)
            .field("originator", &self.originator)
            .field("status", &self.status())
            .finish()
    }
}

impl TransactionContext {
    pub fn id(&self) -> TxnId {
        self.id
    }

    pub fn originator(&self) -> &str {
        &self.originator
    }

    pub fn coordinator(&self) -> &Coordinator {
        &self.coordinator
    }

    /// Current status, or `None` while the coordinator is down.
    pub fn status(&self) -> Option<TxnStatus> {
        self.coordinator.status(self.id)
    }

    pub fn is_active(&self) -> bool {
        self.status() == Some(TxnStatus::Active)
    }

    pub fn enlisted(&self) -> Vec<String> {
        self.coordinator.enlisted(self.id)
    }

    /// Enlists a resource manager; returns `true` on first enlistment.
    pub fn enlist(&self, rm: &str) -> Result<bool, TxnError> {
        self.coordinator.enlist(self, rm)
    }
}

impl Coordinator {
    /// Opens a coordinator over `log`, replaying any records it already holds.
    pub fn new(log: DurableLog, trace: Trace) -> Result<Self, TxnError> {
        Self::with_config(log, trace, CoordinatorConfig::default())
    }

    pub fn with_config(log: DurableLog, trace: Trace, config: CoordinatorConfig) -> Result<Self, TxnError> {
        let coordinator = Coordinator {
            inner: Arc::new(Inner {
                log,
                trace,
                config,
                state: Mutex::new(State {
                    up: false,
                    next_id: 1,
                    txns: BTreeMap::new(),
                    rms: BTreeMap::new(),
                    unmanaged: BTreeSet::new(),
                    prepare_latency: BTreeMap::new(),
                    faults: Vec::new(),
                }),
            }),
        };
        coordinator.reload()?;
        Ok(coordinator)
    }

    fn state(&self) -> MutexGuard<'_, State> {
        self.inner.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn log(&self) -> &DurableLog {
        &self.inner.log
    }

    pub fn trace(&self) -> &Trace {
        &self.inner.trace
    }

    pub fn config(&self) -> CoordinatorConfig {
        self.inner.config
    }

    pub fn register(&self, rm: Arc<dyn ResourceManager>) -> Result<(), TxnError> {
        let mut state = self.state();
        let id = rm.id().to_string();
        if state.rms.contains_key(&id) || state.unmanaged.contains(&id) {
            return Err(TxnError::DuplicateRm(id));
        }
        state.rms.insert(id, rm);
        Ok(())
    }

    pub fn register_unmanaged(&self, resource: &UnmanagedResource) -> Result<(), TxnError> {
        let mut state = self.state();
        let id = resource.endpoint_id.clone();
        if state.rms.contains_key(&id) || !state.unmanaged.insert(id.clone()) {
            return Err(TxnError::DuplicateRm(id));
        }
        Ok(())
    }

    pub fn resource(&self, id: &str) -> Option<Arc<dyn ResourceManager>> {
        self.state().rms.get(id).cloned()
    }

    pub fn resource_ids(&self) -> Vec<String> {
        self.state().rms.keys().cloned().collect()
    }

    pub fn is_up(&self) -> bool {
        self.state().up
    }

    /// Arms a one-shot crash injection for the next commit that reaches
    /// `fault.point`. Several faults may be armed at once.
    pub fn arm_fault(&self, fault: FaultSpec) {
        self.state().faults.push(ArmedFault {
            spec: fault,
            fired: false,
        });
    }

    pub fn fired_faults(&self) -> Vec<FaultSpec> {
        self.state()
            .faults
            .iter()
            .filter(|f| f.fired)
            .map(|f| f.spec.clone())
            .collect()
    }

    /// Simulated time `rm` takes to answer prepare.
    pub fn set_prepare_latency(&self, rm: &str, units: u64) {
        self.state().prepare_latency.insert(rm.to_string(), units);
    }

    pub fn status(&self, id: TxnId) -> Option<TxnStatus> {
        let state = self.state();
        if !state.up {
            return None;
        }
        state.txns.get(&id).map(|e| e.status)
    }

    pub fn enlisted(&self, id: TxnId) -> Vec<String> {
        self.state()
            .txns
            .get(&id)
            .map(|e| e.enlisted.clone())
            .unwrap_or_default()
    }

    pub fn transactions(&self) -> Vec<TxnSummary> {
        self.state()
            .txns
            .iter()
            .map(|(id, e)| TxnSummary {
                id: *id,
                originator: e.originator.clone(),
                status: e.status,
                enlisted: e.enlisted.clone(),
            })
            .collect()
    }

    fn write(&self, record: LogRecord) -> Result<(), TxnError> {
        let line = record.to_string();
        self.inner.log.append(&line)?;
        self.inner.trace.record(EventKind::LogWrite { record: line });
        Ok(())
    }

    pub fn begin(&self, originator: &str) -> Result<TransactionContext, TxnError> {
        let mut state = self.state();
        state.ensure_up()?;
        let id = TxnId(state.next_id);
        self.write(LogRecord::Begin(id))?;
        state.next_id += 1;
        state.txns.insert(
            id,
            Entry {
                originator: originator.to_string(),
                status: TxnStatus::Active,
                enlisted: Vec::new(),
                ended: false,
                orphan: false,
            },
        );
        Ok(TransactionContext {
            id,
            originator: originator.to_string(),
            coordinator: self.clone(),
        })
    }

    pub fn enlist(&self, ctx: &TransactionContext, rm: &str) -> Result<bool, TxnError> {
        let mut state = self.state();
        if state.unmanaged.contains(rm) {
            return Err(TxnError::Unmanaged(rm.to_string()));
        }
        let known = state.rms.contains_key(rm);
        let entry = state.active_entry(ctx.id)?;
        if !known {
            return Err(TxnError::UnknownRm(rm.to_string()));
        }
        if entry.enlisted.iter().any(|r| r == rm) {
            return Ok(false);
        }
        self.write(LogRecord::Enlist(ctx.id, rm.to_string()))?;
        entry.enlisted.push(rm.to_string());
        Ok(true)
    }

    fn set_status(&self, id: TxnId, status: TxnStatus) {
        if let Some(entry) = self.state().txns.get_mut(&id) {
            debug_assert!(entry.status.can_become(status), "{} -> {}", entry.status, status);
            entry.status = status;
        }
    }

    fn end(&self, id: TxnId, status: TxnStatus) -> Result<(), TxnError> {
        self.write(LogRecord::End(id))?;
        let mut state = self.state();
        if let Some(entry) = state.txns.get_mut(&id) {
            entry.ended = true;
            entry.status = status;
        }
        Ok(())
    }

    /// Runs two-phase commit. Participant failures resolve to `Aborted`;
    /// only a crash of the coordinator itself or a dead log device surfaces
    /// as an error.
    pub fn commit(&self, ctx: &TransactionContext) -> Result<Outcome, TxnError> {
        let id = ctx.id;
        let enlisted = {
            let mut state = self.state();
            let entry = state.active_entry(id)?;
            entry.status = TxnStatus::Preparing;
            entry.enlisted.clone()
        };

        self.checkpoint(CrashPoint::BeforePrepare)?;
        let mut unanimous = true;
        for rm in &enlisted {
            if self.prepare_one(id, rm) == Vote::No {
                unanimous = false;
                break;
            }
        }
        self.checkpoint(CrashPoint::AfterVoteBeforeDecision)?;
        if !unanimous {
            return self.abort(id, &enlisted);
        }

        self.write(LogRecord::Commit(id))?;
        self.set_status(id, TxnStatus::Committing);
        self.checkpoint(CrashPoint::AfterCommitRecordBeforePhase2)?;
        let mut complete = true;
        let mut first = true;
        for rm in &enlisted {
            if self.deliver(id, rm, Decision::Commit) {
                if first {
                    first = false;
                    self.checkpoint(CrashPoint::MidPhase2OneCommitted)?;
                }
            } else {
                complete = false;
            }
        }
        self.checkpoint(CrashPoint::AfterPhase2BeforeEnd)?;
        if complete {
            self.end(id, TxnStatus::Committed)?;
        }
        Ok(Outcome::Committed)
    }

    pub fn rollback(&self, ctx: &TransactionContext) -> Result<Outcome, TxnError> {
        let enlisted = {
            let mut state = self.state();
            state.active_entry(ctx.id)?.enlisted.clone()
        };
        self.abort(ctx.id, &enlisted)
    }

    fn abort(&self, id: TxnId, enlisted: &[String]) -> Result<Outcome, TxnError> {
        self.write(LogRecord::Abort(id))?;
        self.set_status(id, TxnStatus::Aborting);
        let complete = self.deliver_all(id, enlisted, Decision::Abort);
        if complete {
            self.end(id, TxnStatus::Aborted)?;
        }
        Ok(Outcome::Aborted)
    }

    fn prepare_one(&self, id: TxnId, rm_id: &str) -> Vote {
        let trace = &self.inner.trace;
        let (rm, latency) = {
            let state = self.state();
            (
                state.rms.get(rm_id).cloned(),
                state.prepare_latency.get(rm_id).copied().unwrap_or(0),
            )
        };
        trace.record(EventKind::Prepare {
            txn: id,
            rm: rm_id.to_string(),
        });
        let timeout = self.inner.config.prepare_timeout;
        if latency > timeout {
            trace.advance(timeout);
            trace.record(EventKind::PrepareTimeout {
                txn: id,
                rm: rm_id.to_string(),
            });
            return Vote::No;
        }
        trace.advance(latency);
        let result = match rm {
            Some(rm) => rm.prepare(id),
            None => Err(crate::rm::RmError::Txn(TxnError::UnknownRm(rm_id.to_string()))),
        };
        match result {
            Ok(vote) => {
                trace.record(EventKind::Vote {
                    txn: id,
                    rm: rm_id.to_string(),
                    vote,
                });
                vote
            }
            Err(e) => {
                trace.record(EventKind::PrepareFailed {
                    txn: id,
                    rm: rm_id.to_string(),
                    reason: e.to_string(),
                });
                Vote::No
            }
        }
    }

    /// Sends one phase-two message; `false` means it must be retried later.
    fn deliver(&self, id: TxnId, rm_id: &str, decision: Decision) -> bool {
        let trace = &self.inner.trace;
        let rm = self.state().rms.get(rm_id).cloned();
        let request = match decision {
            Decision::Commit => EventKind::CommitRequest {
                txn: id,
                rm: rm_id.to_string(),
            },
            Decision::Abort => EventKind::RollbackRequest {
                txn: id,
                rm: rm_id.to_string(),
            },
        };
        trace.record(request);
        let result = match (rm, decision) {
            (Some(rm), Decision::Commit) => rm.commit(id),
            (Some(rm), Decision::Abort) => rm.rollback(id),
            (None, _) => Err(crate::rm::RmError::Txn(TxnError::UnknownRm(rm_id.to_string()))),
        };
        match result {
            Ok(()) => true,
            Err(e) => {
                trace.record(EventKind::Phase2Deferred {
                    txn: id,
                    rm: rm_id.to_string(),
                    reason: e.to_string(),
                });
                false
            }
        }
    }

    fn deliver_all(&self, id: TxnId, rms: &[String], decision: Decision) -> bool {
        // every participant is told, even after one fails
        let delivered: Vec<bool> = rms.iter().map(|rm| self.deliver(id, rm, decision)).collect();
        delivered.into_iter().all(|ok| ok)
    }

    fn checkpoint(&self, point: CrashPoint) -> Result<(), TxnError> {
        let targets: Vec<FaultTarget> = {
            let mut state = self.state();
            state
                .faults
                .iter_mut()
                .filter(|f| !f.fired && f.spec.point == point)
                .map(|f| {
                    f.fired = true;
                    f.spec.target.clone()
                })
                .collect()
        };
        let mut crashed = false;
        for target in targets {
            self.inner.trace.record(EventKind::FaultFired {
                target: target.to_string(),
                point: point.to_string(),
            });
            match target {
                FaultTarget::Coordinator => crashed = true,
                FaultTarget::Rm(id) => {
                    if let Some(rm) = self.resource(&id) {
                        rm.crash();
                    }
                }
            }
        }
        if crashed {
            self.crash();
            return Err(TxnError::Crashed(point));
        }
        Ok(())
    }

    /// Loses all volatile state. Only the log and the registrations survive.
    pub fn crash(&self) {
        let mut state = self.state();
        state.up = false;
        state.txns.clear();
        drop(state);
        self.inner.trace.record(EventKind::Crash {
            target: "coordinator".into(),
        });
    }

    fn reload(&self) -> Result<(), TxnError> {
        let replayed = replay(&self.inner.log.lines())?;
        let mut state = self.state();
        state.txns = replayed
            .txns
            .iter()
            .map(|(id, t)| {
                (
                    *id,
                    Entry {
                        originator: String::new(),
                        status: t.status(),
                        enlisted: t.enlisted.clone(),
                        ended: t.ended,
                        orphan: t.decision.is_none(),
                    },
                )
            })
            .collect();
        let after_log = replayed.max_id().map_or(1, |m| m.0 + 1);
        state.next_id = state.next_id.max(after_log);
        state.up = true;
        Ok(())
    }

    /// Restarts a crashed coordinator from its log and finishes every
    /// unfinished transaction. On a running coordinator this only re-drives
    /// decided transactions whose phase two is incomplete.
    pub fn recover(&self) -> Result<RecoveryOutcome, TxnError> {
        if !self.is_up() {
            self.reload()?;
            self.inner.trace.record(EventKind::Restart {
                target: "coordinator".into(),
            });
        }
        let mut outcome = RecoveryOutcome::default();
        let unfinished: Vec<(TxnId, Entry)> = self
            .state()
            .txns
            .iter()
            .filter(|(_, e)| {
                !e.ended && (e.orphan || matches!(e.status, TxnStatus::Committing | TxnStatus::Aborting))
            })
            .map(|(id, e)| (*id, e.clone()))
            .collect();

        for (id, entry) in unfinished {
            let complete = if entry.orphan {
                self.write(LogRecord::Abort(id))?;
                if let Some(e) = self.state().txns.get_mut(&id) {
                    e.orphan = false;
                    e.status = TxnStatus::Aborting;
                }
                outcome.presumed_aborted += 1;
                self.deliver_all(id, &entry.enlisted, Decision::Abort)
            } else if entry.status == TxnStatus::Committing {
                outcome.recommitted += 1;
                self.deliver_all(id, &entry.enlisted, Decision::Commit)
            } else {
                outcome.reaborted += 1;
                self.deliver_all(id, &entry.enlisted, Decision::Abort)
            };
            if complete {
                let terminal = if entry.status == TxnStatus::Committing {
                    TxnStatus::Committed
                } else {
                    TxnStatus::Aborted
                };
                self.end(id, terminal)?;
            } else {
                outcome.pending += 1;
            }
        }

        // Participants may hold prepared branches the coordinator no longer
        // tracks (e.g. the log was never told about them, or END was written
        // while the participant was down).
        let rms: Vec<Arc<dyn ResourceManager>> = self.state().rms.values().cloned().collect();
        for rm in rms.into_iter().filter(|rm| rm.is_available()) {
            for txn in rm.in_doubt() {
                let status = self.state().txns.get(&txn).map(|e| (e.status, e.orphan));
                let decision = match status {
                    Some((TxnStatus::Committing | TxnStatus::Committed, _)) => Decision::Commit,
                    Some((TxnStatus::Active | TxnStatus::Preparing, false)) => continue,
                    _ => Decision::Abort,
                };
                if self.deliver(txn, rm.id(), decision) {
                    outcome.in_doubt_resolved += 1;
                }
            }
        }
        Ok(outcome)
    }
}
