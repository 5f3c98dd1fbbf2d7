//! Transaction coordination: identifiers, status machine, the coordinator
//! log, two-phase commit with presumed-abort recovery, and context
//! propagation across logical components.

mod coordinator;
mod fault;
mod propagate;
mod record;

use std::fmt;
use std::io;

use serde::{Deserialize, Serialize};

pub use coordinator::{Coordinator, CoordinatorConfig, Outcome, RecoveryOutcome, TransactionContext, TxnSummary};
pub use fault::{CrashPoint, FaultSpec, FaultTarget};
pub use propagate::propagate;
pub use record::{replay, Decision, LogRecord, LogReplay, ReplayedTxn};

/// Transaction identifier; increases monotonically within one log lineage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TxnId(pub u64);

impl fmt::Display for TxnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxnStatus {
    Active,
    Preparing,
    Committing,
    Committed,
    Aborting,
    Aborted,
}

impl TxnStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, TxnStatus::Committed | TxnStatus::Aborted)
    }

    pub fn can_become(self, next: TxnStatus) -> bool {
        use TxnStatus::*;
        matches!(
            (self, next),
            (Active, Preparing)
                | (Active, Aborting)
                | (Preparing, Committing)
                | (Preparing, Aborting)
                | (Committing, Committed)
                | (Aborting, Aborted)
        )
    }
}

impl fmt::Display for TxnStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TxnStatus::Active => "active",
            TxnStatus::Preparing => "preparing",
            TxnStatus::Committing => "committing",
            TxnStatus::Committed => "committed",
            TxnStatus::Aborting => "aborting",
            TxnStatus::Aborted => "aborted",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TxnError {
    #[error("coordinator is down")]
    CoordinatorDown,
    #[error("coordinator crashed at {0}")]
    Crashed(CrashPoint),
    #[error("unknown transaction {0}")]
    UnknownTxn(TxnId),
    #[error("transaction {0} is {1}, not active")]
    NotActive(TxnId, TxnStatus),
    #[error("unknown resource manager `{0}`")]
    UnknownRm(String),
    #[error("resource manager `{0}` is already registered")]
    DuplicateRm(String),
    #[error("`{0}` is an unmanaged resource and cannot enlist")]
    Unmanaged(String),
    #[error("log device failure: {0}")]
    Log(#[from] io::Error),
    #[error("corrupt coordinator log at line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
}
