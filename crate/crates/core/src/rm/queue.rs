//! Transactional FIFO queue.
//!
//! Sends are staged per transaction and appended to the committed queue only
//! when the transaction commits. Receives take a hold on the first unheld
//! committed message; the message is removed at commit and released (in its
//! original position) at rollback.

use std::collections::BTreeMap;
use std::sync::{Mutex, MutexGuard};

use serde::{Deserialize, Serialize};

use super::branches::{Branch, Branches};
use super::{ParticipantState, ResourceManager, RmError, RmLog, Vote};
use crate::log::DurableLog;
use crate::sim::{Applied, EventKind, Trace};
use crate::txn::{TransactionContext, TxnId};

pub type Message = Vec<u8>;

#[derive(Debug, Default, Clone)]
struct Workspace {
    sends: Vec<Message>,
    receives: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct PreparedPayload {
    sends: Vec<String>,
    receives: Vec<u64>,
}

#[derive(Debug, Default)]
struct State {
    up: bool,
    next_seq: u64,
    committed: BTreeMap<u64, Message>,
    holds: BTreeMap<u64, TxnId>,
    branches: Branches<Workspace>,
}

impl State {
    fn release(&mut self, txn: TxnId) {
        self.holds.retain(|_, holder| *holder != txn);
    }
}

#[derive(Debug)]
pub struct TxnQueue {
    id: String,
    log: RmLog,
    trace: Trace,
    state: Mutex<State>,
}

fn show(message: &[u8]) -> String {
    String::from_utf8_lossy(message).into_owned()
}

impl TxnQueue {
    pub fn new(id: impl Into<String>, log: DurableLog, trace: Trace) -> Self {
        let id = id.into();
        TxnQueue {
            log: RmLog::new(id.clone(), log, trace.clone()),
            id,
            trace,
            state: Mutex::new(State {
                up: true,
                next_seq: 1,
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

    /// Appends a committed message outside any transaction (initial load).
    pub fn seed(&self, message: impl Into<Message>) {
        let mut state = self.lock();
        let seq = state.next_seq;
        state.next_seq += 1;
        state.committed.insert(seq, message.into());
    }

    fn workspace<R>(
        &self,
        ctx: &TransactionContext,
        f: impl FnOnce(&mut State, TxnId) -> R,
    ) -> Result<R, RmError> {
        let first_touch = ctx.enlist(&self.id)?;
        let mut state = self.up()?;
        state.branches.admit(ctx.id(), first_touch)?;
        Ok(f(&mut state, ctx.id()))
    }

    /// Stages `message`; it becomes visible only if the transaction commits.
    pub fn send(&self, ctx: &TransactionContext, message: impl Into<Message>) -> Result<(), RmError> {
        let message = message.into();
        let shown = show(&message);
        self.workspace(ctx, |state, txn| {
            state.branches.live.get_mut(&txn).expect("admitted").work.sends.push(message);
        })?;
        self.trace.record(EventKind::Send {
            queue: self.id.clone(),
            txn: ctx.id(),
            message: shown,
        });
        Ok(())
    }

    /// Provisionally takes the head message.
    pub fn receive(&self, ctx: &TransactionContext) -> Result<Option<Message>, RmError> {
        let taken = self.workspace(ctx, |state, txn| {
            let head = state
                .committed
                .iter()
                .find(|(seq, _)| !state.holds.contains_key(seq))
                .map(|(seq, m)| (*seq, m.clone()));
            if let Some((seq, _)) = head {
                state.holds.insert(seq, txn);
                state.branches.live.get_mut(&txn).expect("admitted").work.receives.push(seq);
            }
            head.map(|(_, m)| m)
        })?;
        self.trace.record(EventKind::Receive {
            queue: self.id.clone(),
            txn: ctx.id(),
            message: taken.as_deref().map(show),
        });
        Ok(taken)
    }

    /// Head message visible to a new receiver, without taking it.
    pub fn peek(&self) -> Option<Message> {
        let state = self.lock();
        state
            .committed
            .iter()
            .find(|(seq, _)| !state.holds.contains_key(seq))
            .map(|(_, m)| m.clone())
    }

    /// Every committed message in queue order, including held ones.
    pub fn messages(&self) -> Vec<Message> {
        self.lock().committed.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.lock().committed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn outcome(&self, txn: TxnId, applied: Applied) {
        self.trace.record(EventKind::Outcome {
            txn,
            rm: self.id.clone(),
            applied,
        });
    }
}

impl ResourceManager for TxnQueue {
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
        let payload = PreparedPayload {
            sends: branch.work.sends.iter().map(hex::encode).collect(),
            receives: branch.work.receives.clone(),
        };
        let bytes = serde_json::to_vec(&payload).expect("payload serializes");
        self.log.prepared(txn, &bytes)?;
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
        for seq in branch.work.receives {
            state.committed.remove(&seq);
            state.holds.remove(&seq);
        }
        for message in branch.work.sends {
            let seq = state.next_seq;
            state.next_seq += 1;
            state.committed.insert(seq, message);
        }
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
        state.release(txn);
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
        state.holds.clear();
        state.branches.done = replayed.done;
        for (txn, bytes) in replayed.in_doubt {
            let corrupt = |reason: String| RmError::CorruptLog { line: 0, reason };
            let payload: PreparedPayload =
                serde_json::from_slice(&bytes).map_err(|e| corrupt(format!("payload of {txn}: {e}")))?;
            let sends = payload
                .sends
                .iter()
                .map(hex::decode)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| corrupt(format!("payload of {txn}: {e}")))?;
            for seq in &payload.receives {
                state.holds.insert(*seq, txn);
            }
            state.branches.live.insert(
                txn,
                Branch {
                    state: ParticipantState::Prepared,
                    work: Workspace {
                        sends,
                        receives: payload.receives,
                    },
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
        state.holds.clear();
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
