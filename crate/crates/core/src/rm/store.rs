//! Versioned key-value store with optimistic validation at prepare.
//!
//! Each transaction works in a private workspace (read-set of versions seen,
//! write-set of new values or tombstones). Prepare validates the read-set
//! against the committed versions and takes commit locks: shared on keys
//! read, exclusive on keys written. The first transaction to prepare wins;
//! any later conflicting prepare votes `No`.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Mutex, MutexGuard};

use serde::{Deserialize, Serialize};

use super::branches::Branches;
use super::{ParticipantState, ResourceManager, RmError, RmLog, Vote};
use crate::log::DurableLog;
use crate::sim::{Applied, EventKind, Trace};
use crate::txn::{TransactionContext, TxnId};

pub const MAX_KEY_CHARS: usize = 256;
pub const MAX_VALUE_BYTES: usize = 64 * 1024;

/// Committed value of a key. Deleted keys keep a tombstone (`value: None`)
/// so that their version keeps increasing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StoreEntry {
    pub value: Option<Vec<u8>>,
    pub version: u64,
}

#[derive(Debug, Default, Clone)]
struct Workspace {
    reads: BTreeMap<String, u64>,
    writes: BTreeMap<String, Option<Vec<u8>>>,
}

#[derive(Debug, Default)]
struct KeyLock {
    writer: Option<TxnId>,
    readers: BTreeSet<TxnId>,
}

impl KeyLock {
    fn is_free(&self) -> bool {
        self.writer.is_none() && self.readers.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct PreparedPayload {
    reads: Vec<String>,
    writes: Vec<(String, Option<String>)>,
}

#[derive(Debug, Default)]
struct State {
    up: bool,
    committed: BTreeMap<String, StoreEntry>,
    branches: Branches<Workspace>,
    locks: BTreeMap<String, KeyLock>,
}

impl State {
    fn version(&self, key: &str) -> u64 {
        self.committed.get(key).map_or(0, |e| e.version)
    }

    fn conflicts(&self, txn: TxnId, ws: &Workspace) -> bool {
        let other = |t: &TxnId| *t != txn;
        let stale = ws.reads.iter().any(|(k, seen)| self.version(k) != *seen);
        let read_blocked = ws.reads.keys().any(|k| {
            self.locks
                .get(k)
                .is_some_and(|l| l.writer.as_ref().is_some_and(other))
        });
        let write_blocked = ws.writes.keys().any(|k| {
            self.locks.get(k).is_some_and(|l| {
                l.writer.as_ref().is_some_and(other) || l.readers.iter().any(other)
            })
        });
        stale || read_blocked || write_blocked
    }

    fn lock(&mut self, txn: TxnId, ws: &Workspace) {
        for k in ws.reads.keys() {
            self.locks.entry(k.clone()).or_default().readers.insert(txn);
        }
        for k in ws.writes.keys() {
            self.locks.entry(k.clone()).or_default().writer = Some(txn);
        }
    }

    fn unlock(&mut self, txn: TxnId) {
        self.locks.retain(|_, l| {
            l.readers.remove(&txn);
            if l.writer == Some(txn) {
                l.writer = None;
            }
            !l.is_free()
        });
    }
}

/// A managed resource holding versioned business data.
#[derive(Debug)]
pub struct ManagedStore {
    id: String,
    log: RmLog,
    trace: Trace,
    state: Mutex<State>,
}

fn check_key(key: &str) -> Result<(), RmError> {
    if key.is_empty() {
        return Err(RmError::InvalidKey("empty key".into()));
    }
    if key.chars().count() > MAX_KEY_CHARS {
        return Err(RmError::InvalidKey(format!("longer than {MAX_KEY_CHARS} characters")));
    }
    Ok(())
}

impl ManagedStore {
    pub fn new(id: impl Into<String>, log: DurableLog, trace: Trace) -> Self {
        let id = id.into();
        ManagedStore {
            log: RmLog::new(id.clone(), log, trace.clone()),
            id,
            trace,
            state: Mutex::new(State {
                up: true,
                ..State::default()
            }),
        }
    }

    pub fn in_memory(id: impl Into<String>, trace: Trace) -> Self {
        Self::new(id, DurableLog::in_memory(), trace)
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn up(&self) -> Result<MutexGuard<'_, State>, RmError> {
        let state = self.lock();
        if state.up {
            Ok(state)
        } else {
            Err(RmError::Unavailable(self.id.clone()))
        }
    }

    pub fn log(&self) -> &DurableLog {
        self.log.device()
    }

    /// Installs committed data outside any transaction (initial load).
    pub fn seed(&self, key: &str, value: impl Into<Vec<u8>>) -> Result<(), RmError> {
        check_key(key)?;
        let value = value.into();
        if value.len() > MAX_VALUE_BYTES {
            return Err(RmError::ValueTooLarge(value.len()));
        }
        let mut state = self.lock();
        let entry = state.committed.entry(key.to_string()).or_insert(StoreEntry {
            value: None,
            version: 0,
        });
        entry.version += 1;
        entry.value = Some(value);
        Ok(())
    }

    fn workspace<R>(
        &self,
        ctx: &TransactionContext,
        key: &str,
        f: impl FnOnce(&mut State, TxnId) -> Result<R, RmError>,
    ) -> Result<R, RmError> {
        check_key(key)?;
        let first_touch = ctx.enlist(&self.id)?;
        let mut state = self.up()?;
        state.branches.admit(ctx.id(), first_touch)?;
        f(&mut state, ctx.id())
    }

    /// Reads `key`, seeing this transaction's own staged writes.
    pub fn get(&self, ctx: &TransactionContext, key: &str) -> Result<Option<Vec<u8>>, RmError> {
        self.workspace(ctx, key, |state, txn| {
            let version = state.version(key);
            let committed = state.committed.get(key).and_then(|e| e.value.clone());
            let ws = &mut state.branches.live.get_mut(&txn).expect("admitted").work;
            if let Some(staged) = ws.writes.get(key) {
                return Ok(staged.clone());
            }
            ws.reads.entry(key.to_string()).or_insert(version);
            Ok(committed)
        })
    }

    pub fn put(&self, ctx: &TransactionContext, key: &str, value: impl Into<Vec<u8>>) -> Result<(), RmError> {
        let value = value.into();
        if value.len() > MAX_VALUE_BYTES {
            return Err(RmError::ValueTooLarge(value.len()));
        }
        self.stage(ctx, key, Some(value))
    }

    pub fn delete(&self, ctx: &TransactionContext, key: &str) -> Result<(), RmError> {
        self.stage(ctx, key, None)
    }

    fn stage(&self, ctx: &TransactionContext, key: &str, value: Option<Vec<u8>>) -> Result<(), RmError> {
        self.workspace(ctx, key, |state, txn| {
            let ws = &mut state.branches.live.get_mut(&txn).expect("admitted").work;
            ws.writes.insert(key.to_string(), value);
            Ok(())
        })
    }

    /// Committed value, outside any transaction.
    pub fn committed(&self, key: &str) -> Option<Vec<u8>> {
        self.lock().committed.get(key).and_then(|e| e.value.clone())
    }

    pub fn version(&self, key: &str) -> u64 {
        self.lock().version(key)
    }

    /// All committed entries including tombstones.
    pub fn entries(&self) -> BTreeMap<String, StoreEntry> {
        self.lock().committed.clone()
    }

    /// Live committed key/value pairs.
    pub fn snapshot(&self) -> BTreeMap<String, Vec<u8>> {
        self.lock()
            .committed
            .iter()
            .filter_map(|(k, e)| e.value.clone().map(|v| (k.clone(), v)))
            .collect()
    }

    pub fn locked_keys(&self) -> Vec<String> {
        self.lock().locks.keys().cloned().collect()
    }

    fn outcome(&self, txn: TxnId, applied: Applied) {
        self.trace.record(EventKind::Outcome {
            txn,
            rm: self.id.clone(),
            applied,
        });
    }
}

impl ResourceManager for ManagedStore {
    fn id(&self) -> &str {
        &self.id
    }

    fn prepare(&self, txn: TxnId) -> Result<Vote, RmError> {
        let mut state = self.up()?;
        let Some(branch) = state.branches.live.get(&txn) else {
            return Ok(Vote::No);
        };
        if branch.state == ParticipantState::Prepared {
            return Ok(Vote::Yes);
        }
        let ws = branch.work.clone();
        if state.conflicts(txn, &ws) {
            state.branches.live.remove(&txn);
            drop(state);
            self.outcome(txn, Applied::RolledBack);
            return Ok(Vote::No);
        }
        let payload = PreparedPayload {
            reads: ws.reads.keys().cloned().collect(),
            writes: ws
                .writes
                .iter()
                .map(|(k, v)| (k.clone(), v.as_ref().map(hex::encode)))
                .collect(),
        };
        let bytes = serde_json::to_vec(&payload).expect("payload serializes");
        self.log.prepared(txn, &bytes)?;
        state.lock(txn, &ws);
        state.branches.live.get_mut(&txn).expect("present").state = ParticipantState::Prepared;
        Ok(Vote::Yes)
    }

    fn commit(&self, txn: TxnId) -> Result<(), RmError> {
        let mut state = self.up()?;
        match state.branches.live.get(&txn).map(|b| b.state) {
            Some(ParticipantState::Prepared) => {}
            Some(_) => return Err(RmError::NotPrepared(txn)),
            None if state.branches.done.contains(&txn) => return Ok(()),
            None => return Err(RmError::NotPrepared(txn)),
        }
        self.log.done(txn)?;
        let branch = state.branches.live.remove(&txn).expect("present");
        for (key, value) in branch.work.writes {
            let entry = state.committed.entry(key).or_insert(StoreEntry {
                value: None,
                version: 0,
            });
            entry.version += 1;
            entry.value = value;
        }
        state.unlock(txn);
        state.branches.done.insert(txn);
        drop(state);
        self.outcome(txn, Applied::Committed);
        Ok(())
    }

    fn rollback(&self, txn: TxnId) -> Result<(), RmError> {
        let mut state = self.up()?;
        let Some(branch) = state.branches.live.get(&txn) else {
            return Ok(());
        };
        if branch.state == ParticipantState::Prepared {
            self.log.done(txn)?;
            state.branches.done.insert(txn);
        }
        state.branches.live.remove(&txn);
        state.unlock(txn);
        drop(state);
        self.outcome(txn, Applied::RolledBack);
        Ok(())
    }

    fn recover(&self) -> Result<(), RmError> {
        if self.lock().up {
            return Ok(());
        }
        let replayed = self.log.replay()?;
        let mut state = self.lock();
        state.branches.live.clear();
        state.locks.clear();
        state.branches.done = replayed.done;
        for (txn, bytes) in replayed.in_doubt {
            let corrupt = |reason: String| RmError::CorruptLog { line: 0, reason };
            let payload: PreparedPayload =
                serde_json::from_slice(&bytes).map_err(|e| corrupt(format!("payload of {txn}: {e}")))?;
            let mut ws = Workspace::default();
            for key in payload.reads {
                ws.reads.insert(key, 0);
            }
            for (key, value) in payload.writes {
                let value = value
                    .map(hex::decode)
                    .transpose()
                    .map_err(|e| corrupt(format!("payload of {txn}: {e}")))?;
                ws.writes.insert(key, value);
            }
            state.lock(txn, &ws);
            state.branches.live.insert(
                txn,
                super::branches::Branch {
                    state: ParticipantState::Prepared,
                    work: ws,
                },
            );
        }
        state.up = true;
        drop(state);
        self.trace.record(EventKind::Restart { target: self.id.clone() });
        Ok(())
    }

    fn in_doubt(&self) -> Vec<TxnId> {
        self.lock().branches.in_doubt()
    }

    fn crash(&self) {
        let mut state = self.lock();
        let lost = state.branches.active();
        state.branches.live.clear();
        state.branches.done.clear();
        state.locks.clear();
        state.up = false;
        drop(state);
        self.trace.record(EventKind::Crash { target: self.id.clone() });
        for txn in lost {
            self.outcome(txn, Applied::Lost);
        }
    }

    fn is_available(&self) -> bool {
        self.lock().up
    }
}
