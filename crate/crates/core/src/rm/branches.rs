use std::collections::{BTreeMap, BTreeSet};

use super::{ParticipantState, RmError};
use crate::txn::TxnId;

/// One transaction's branch at a resource manager.
#[derive(Debug, Clone)]
pub(crate) struct Branch<W> {
    pub state: ParticipantState,
    pub work: W,
}

/// Volatile branch table plus the set of branches finished after prepare.
#[derive(Debug)]
pub(crate) struct Branches<W> {
    pub live: BTreeMap<TxnId, Branch<W>>,
    pub done: BTreeSet<TxnId>,
}

impl<W> Default for Branches<W> {
    fn default() -> Self {
        Branches {
            live: BTreeMap::new(),
            done: BTreeSet::new(),
        }
    }
}

impl<W: Default> Branches<W> {
    /// Returns the active workspace for `txn`. `first_touch` is whether the
    /// coordinator has just enlisted this resource manager; an enlisted
    /// transaction without a workspace lost it in a crash.
    pub fn admit(&mut self, txn: TxnId, first_touch: bool) -> Result<&mut W, RmError> {
        if !self.live.contains_key(&txn) {
            if self.done.contains(&txn) {
                return Err(RmError::NotActive(txn));
            }
            if !first_touch {
                return Err(RmError::WorkspaceLost(txn));
            }
            self.live.insert(
                txn,
                Branch {
                    state: ParticipantState::Active,
                    work: W::default(),
                },
            );
        }
        let branch = self.live.get_mut(&txn).expect("inserted above");
        if branch.state != ParticipantState::Active {
            return Err(RmError::NotActive(txn));
        }
        Ok(&mut branch.work)
    }

    pub fn in_doubt(&self) -> Vec<TxnId> {
        self.live
            .iter()
            .filter(|(_, b)| b.state == ParticipantState::Prepared)
            .map(|(id, _)| *id)
            .collect()
    }

    pub fn active(&self) -> Vec<TxnId> {
        self.live
            .iter()
            .filter(|(_, b)| b.state == ParticipantState::Active)
            .map(|(id, _)| *id)
            .collect()
    }
}
