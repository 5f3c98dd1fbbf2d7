//! Resource managers: participants that can prepare, commit or roll back
//! their resources under a coordinator's control.

mod branches;
mod queue;
mod rmlog;
mod store;

use std::io;

use serde::{Deserialize, Serialize};

use crate::txn::{TxnError, TxnId};

pub use queue::{Message, TxnQueue};
pub use rmlog::{RmLog, RmLogState};
pub use store::{ManagedStore, StoreEntry, MAX_KEY_CHARS, MAX_VALUE_BYTES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vote {
    Yes,
    No,
}

/// Per-transaction participant state inside a resource manager.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParticipantState {
    Active,
    Prepared,
    Done,
}

#[derive(Debug, thiserror::Error)]
pub enum RmError {
    #[error("resource manager `{0}` is unavailable")]
    Unavailable(String),
    #[error("transaction {0} was never prepared here")]
    NotPrepared(TxnId),
    #[error("transaction {0} is no longer active at this resource manager")]
    NotActive(TxnId),
    #[error("transaction {0} lost its workspace in a crash")]
    WorkspaceLost(TxnId),
    #[error("invalid key: {0}")]
    InvalidKey(String),
    #[error("value of {0} bytes exceeds the {max} byte limit", max = MAX_VALUE_BYTES)]
    ValueTooLarge(usize),
    #[error(transparent)]
    Txn(#[from] TxnError),
    #[error("resource manager log: {0}")]
    Log(#[from] io::Error),
    #[error("corrupt resource manager log at line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
}

/// The participant side of two-phase commit.
///
/// `commit` and `rollback` must be idempotent; `rollback` of a transaction the
/// participant has never seen succeeds. `crash` simulates process loss: all
/// volatile state disappears and every call fails with `Unavailable` until
/// `recover` reloads prepared state from the local log.
pub trait ResourceManager: Send + Sync {
    fn id(&self) -> &str;

    fn prepare(&self, txn: TxnId) -> Result<Vote, RmError>;

    fn commit(&self, txn: TxnId) -> Result<(), RmError>;

    fn rollback(&self, txn: TxnId) -> Result<(), RmError>;

    fn recover(&self) -> Result<(), RmError>;

    /// Transactions prepared here whose outcome has not arrived.
    fn in_doubt(&self) -> Vec<TxnId>;

    fn crash(&self);

    fn is_available(&self) -> bool;
}

/// Marker for data held by a legacy application. It can be named but never
/// enlisted in a transaction.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct UnmanagedResource {
    pub endpoint_id: String,
}

impl UnmanagedResource {
    pub fn new(endpoint_id: impl Into<String>) -> Self {
        UnmanagedResource {
            endpoint_id: endpoint_id.into(),
        }
    }
}
