use std::collections::{BTreeMap, BTreeSet};

use super::RmError;
use crate::log::DurableLog;
use crate::sim::{EventKind, Trace};
use crate::txn::TxnId;

/// Resource-manager-local decision log:
/// `PREPARED\t<txn>\t<payload-hex>` and `DONE\t<txn>`.
#[derive(Debug, Clone)]
pub struct RmLog {
    rm: String,
    device: DurableLog,
    trace: Trace,
}

/// Replayed content of an rm-local log.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct RmLogState {
    /// Prepared transactions without a `DONE`, with their payloads.
    pub in_doubt: BTreeMap<TxnId, Vec<u8>>,
    pub done: BTreeSet<TxnId>,
}

impl RmLog {
    pub fn new(rm: impl Into<String>, device: DurableLog, trace: Trace) -> Self {
        RmLog {
            rm: rm.into(),
            device,
            trace,
        }
    }

    pub fn device(&self) -> &DurableLog {
        &self.device
    }

    pub fn prepared(&self, txn: TxnId, payload: &[u8]) -> Result<(), RmError> {
        self.device
            .append(&format!("PREPARED\t{txn}\t{}", hex::encode(payload)))?;
        self.trace.record(EventKind::RmLogWrite {
            rm: self.rm.clone(),
            txn,
            record: "PREPARED".into(),
        });
        Ok(())
    }

    pub fn done(&self, txn: TxnId) -> Result<(), RmError> {
        self.device.append(&format!("DONE\t{txn}"))?;
        self.trace.record(EventKind::RmLogWrite {
            rm: self.rm.clone(),
            txn,
            record: "DONE".into(),
        });
        Ok(())
    }

    pub fn replay(&self) -> Result<RmLogState, RmError> {
        parse(&self.device.lines())
    }
}

fn parse(lines: &[String]) -> Result<RmLogState, RmError> {
    let mut state = RmLogState::default();
    for (index, line) in lines.iter().enumerate() {
        let corrupt = |reason: String| RmError::CorruptLog {
            line: index + 1,
            reason,
        };
        let parts: Vec<&str> = line.split('\t').collect();
        let txn = |s: &str| {
            s.parse::<u64>()
                .map(TxnId)
                .map_err(|_| corrupt(format!("bad transaction id `{s}`")))
        };
        match parts.as_slice() {
            ["PREPARED", t, payload] => {
                let id = txn(t)?;
                let bytes = hex::decode(payload).map_err(|e| corrupt(e.to_string()))?;
                if state.done.contains(&id) || state.in_doubt.insert(id, bytes).is_some() {
                    return Err(corrupt(format!("transaction {id} prepared twice")));
                }
            }
            ["DONE", t] => {
                let id = txn(t)?;
                state.in_doubt.remove(&id);
                state.done.insert(id);
            }
            _ => return Err(corrupt(format!("unrecognised record `{}`", line.escape_default()))),
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_tracks_in_doubt_and_done() {
        let log = RmLog::new("s", DurableLog::in_memory(), Trace::disabled());
        log.prepared(TxnId(1), b"one").unwrap();
        log.prepared(TxnId(2), b"two").unwrap();
        log.done(TxnId(1)).unwrap();
        assert_eq!(log.device().lines()[0], "PREPARED\t1\t6f6e65");
        let state = log.replay().unwrap();
        assert_eq!(state.in_doubt.into_iter().collect::<Vec<_>>(), vec![(TxnId(2), b"two".to_vec())]);
        assert!(state.done.contains(&TxnId(1)));
    }

    #[test]
    fn corrupt_lines_are_rejected() {
        for bad in ["PREPARED\t1\tzz", "DONE", "HELLO\t1", "PREPARED\tx\t00"] {
            let err = parse(&[bad.to_string()]).unwrap_err();
            assert!(matches!(err, RmError::CorruptLog { line: 1, .. }), "{bad}");
        }
    }
}
