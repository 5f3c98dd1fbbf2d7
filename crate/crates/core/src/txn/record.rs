use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::{TxnError, TxnId, TxnStatus};

/// One line of the coordinator log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LogRecord {
    Begin(TxnId),
    Enlist(TxnId, String),
    Commit(TxnId),
    Abort(TxnId),
    End(TxnId),
}

impl LogRecord {
    pub fn txn(&self) -> TxnId {
        match self {
            LogRecord::Begin(t)
            | LogRecord::Enlist(t, _)
            | LogRecord::Commit(t)
            | LogRecord::Abort(t)
            | LogRecord::End(t) => *t,
        }
    }
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LogRecord::Begin(t) => write!(f, "BEGIN\t{t}"),
            LogRecord::Enlist(t, rm) => write!(f, "ENLIST\t{t}\t{rm}"),
            LogRecord::Commit(t) => write!(f, "COMMIT\t{t}"),
            LogRecord::Abort(t) => write!(f, "ABORT\t{t}"),
            LogRecord::End(t) => write!(f, "END\t{t}"),
        }
    }
}

impl FromStr for LogRecord {
    type Err = String;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = line.split('\t').collect();
        let txn = |s: &str| {
            s.parse::<u64>()
                .map(TxnId)
                .map_err(|_| format!("bad transaction id `{s}`"))
        };
        match parts.as_slice() {
            ["BEGIN", t] => Ok(LogRecord::Begin(txn(t)?)),
            ["ENLIST", t, rm] if !rm.is_empty() => Ok(LogRecord::Enlist(txn(t)?, rm.to_string())),
            ["COMMIT", t] => Ok(LogRecord::Commit(txn(t)?)),
            ["ABORT", t] => Ok(LogRecord::Abort(txn(t)?)),
            ["END", t] => Ok(LogRecord::End(txn(t)?)),
            _ => Err(format!("unrecognised record `{}`", line.escape_default())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Commit,
    Abort,
}

/// What the log says about one transaction.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplayedTxn {
    pub enlisted: Vec<String>,
    pub decision: Option<Decision>,
    pub ended: bool,
}

impl ReplayedTxn {
    /// Status reconstructed from the durable records alone. `Preparing` is
    /// never logged, so an undecided transaction reads as `Active`.
    pub fn status(&self) -> TxnStatus {
        match (self.decision, self.ended) {
            (None, _) => TxnStatus::Active,
            (Some(Decision::Commit), false) => TxnStatus::Committing,
            (Some(Decision::Commit), true) => TxnStatus::Committed,
            (Some(Decision::Abort), false) => TxnStatus::Aborting,
            (Some(Decision::Abort), true) => TxnStatus::Aborted,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LogReplay {
    pub txns: BTreeMap<TxnId, ReplayedTxn>,
}

impl LogReplay {
    pub fn max_id(&self) -> Option<TxnId> {
        self.txns.keys().next_back().copied()
    }

    pub fn statuses(&self) -> BTreeMap<TxnId, TxnStatus> {
        self.txns.iter().map(|(id, t)| (*id, t.status())).collect()
    }
}

/// Parses and checks a coordinator log. Any record that breaks the
/// BEGIN < ENLIST* < (COMMIT|ABORT) < END ordering is reported as corrupt.
pub fn replay<S: AsRef<str>>(lines: &[S]) -> Result<LogReplay, TxnError> {
    let mut out = LogReplay::default();
    for (index, line) in lines.iter().enumerate() {
        let corrupt = |reason: String| TxnError::CorruptLog {
            line: index + 1,
            reason,
        };
        let record: LogRecord = line.as_ref().parse().map_err(corrupt)?;
        let id = record.txn();
        if let LogRecord::Begin(_) = record {
            if out.txns.contains_key(&id) {
                return Err(corrupt(format!("transaction {id} begun twice")));
            }
            out.txns.insert(id, ReplayedTxn::default());
            continue;
        }
        let txn = out
            .txns
            .get_mut(&id)
            .ok_or_else(|| corrupt(format!("{} before BEGIN", line.as_ref())))?;
        if txn.ended {
            return Err(corrupt(format!("record for ended transaction {id}")));
        }
        match record {
            LogRecord::Begin(_) => unreachable!(),
            LogRecord::Enlist(_, rm) => {
                if txn.decision.is_some() {
                    return Err(corrupt(format!("ENLIST after decision for {id}")));
                }
                if !txn.enlisted.contains(&rm) {
                    txn.enlisted.push(rm);
                }
            }
            LogRecord::Commit(_) | LogRecord::Abort(_) => {
                if txn.decision.is_some() {
                    return Err(corrupt(format!("second decision for {id}")));
                }
                txn.decision = Some(if matches!(record, LogRecord::Commit(_)) {
                    Decision::Commit
                } else {
                    Decision::Abort
                });
            }
            LogRecord::End(_) => {
                if txn.decision.is_none() {
                    return Err(corrupt(format!("END without decision for {id}")));
                }
                txn.ended = true;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_round_trip_bit_exact() {
        let lines = ["BEGIN\t7", "ENLIST\t7\tstore-a", "COMMIT\t7", "ABORT\t8", "END\t7"];
        for line in lines {
            assert_eq!(line.parse::<LogRecord>().unwrap().to_string(), line);
        }
    }

    #[test]
    fn replay_reconstructs_status() {
        let log = [
            "BEGIN\t1", "ENLIST\t1\ta", "COMMIT\t1", "END\t1", "BEGIN\t2", "ENLIST\t2\ta",
            "ENLIST\t2\tb", "BEGIN\t3", "ABORT\t3",
        ];
        let r = replay(&log).unwrap();
        assert_eq!(r.txns[&TxnId(1)].status(), TxnStatus::Committed);
        assert_eq!(r.txns[&TxnId(2)].status(), TxnStatus::Active);
        assert_eq!(r.txns[&TxnId(2)].enlisted, vec!["a", "b"]);
        assert_eq!(r.txns[&TxnId(3)].status(), TxnStatus::Aborting);
        assert_eq!(r.max_id(), Some(TxnId(3)));
    }

    #[test]
    fn replay_rejects_corruption() {
        let cases: [&[&str]; 6] = [
            &["BEGIN\tx"],
            &["COMMIT\t1"],
            &["BEGIN\t1", "COMMIT\t1", "ABORT\t1"],
            &["BEGIN\t1", "END\t1"],
            &["BEGIN\t1", "BEGIN\t1"],
            &["BEGIN\t1", "COMMIT\t1", "ENLIST\t1\ta"],
        ];
        for case in cases {
            assert!(
                matches!(replay(case), Err(TxnError::CorruptLog { .. })),
                "{case:?}"
            );
        }
    }
}
