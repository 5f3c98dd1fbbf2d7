//! Exhaustive crash sweep: one run per (target, crash point), each followed
//! by recovery, with atomicity, conservation and log checks on the result.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use super::report::RunReport;
use super::runner::{run_scenario, RunError, RunOptions};
use super::scenario::{Check, Scenario};
use crate::sim::{Applied, EventKind};
use crate::txn::{replay, CrashPoint, FaultSpec, FaultTarget, TxnId, TxnStatus};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SweepRun {
    pub fault: String,
    pub fired: bool,
    /// Terminal status of every transaction, by id.
    pub outcomes: BTreeMap<TxnId, Option<TxnStatus>>,
    pub violations: Vec<String>,
}

impl SweepRun {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SweepReport {
    pub scenario: String,
    pub runs: Vec<SweepRun>,
}

impl SweepReport {
    pub fn passed(&self) -> bool {
        self.runs.iter().all(SweepRun::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &SweepRun> {
        self.runs.iter().filter(|r| !r.passed())
    }
}

impl fmt::Display for SweepReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "sweep {}: {} combinations", self.scenario, self.runs.len())?;
        for run in &self.runs {
            let outcomes: Vec<String> = run
                .outcomes
                .iter()
                .map(|(id, s)| match s {
                    Some(s) => format!("#{id}={}", format!("{s:?}").to_lowercase()),
                    None => format!("#{id}=unknown"),
                })
                .collect();
            let fired = if run.fired { "fired" } else { "not reached" };
            let verdict = if run.passed() { "ok" } else { "VIOLATION" };
            writeln!(f, "  {:<48} {:<11} {:<9} {}", run.fault, fired, verdict, outcomes.join(" "))?;
            for v in &run.violations {
                writeln!(f, "      {v}")?;
            }
        }
        let bad = self.failures().count();
        write!(f, "{} of {} runs atomic", self.runs.len() - bad, self.runs.len())
    }
}

/// Every single-fault combination: the coordinator, then each resource
/// manager, each at all five crash points.
pub fn combinations(scenario: &Scenario) -> Vec<FaultSpec> {
    let mut targets = vec![FaultTarget::Coordinator];
    targets.extend(scenario.resource_ids().into_iter().map(FaultTarget::Rm));
    targets
        .into_iter()
        .flat_map(|t| CrashPoint::ALL.into_iter().map(move |p| FaultSpec::new(t.clone(), p)))
        .collect()
}

pub fn crash_sweep(scenario: &Scenario) -> Result<SweepReport, RunError> {
    let mut runs = Vec::new();
    for fault in combinations(scenario) {
        let options = RunOptions {
            seed: None,
            faults: vec![fault.clone()],
            skip_asserts: true,
            recover_at_end: true,
        };
        let report = run_scenario(scenario, &options)?;
        runs.push(SweepRun {
            fault: fault.to_string(),
            fired: !report.fired_faults.is_empty(),
            outcomes: report.transactions.iter().map(|t| (t.id, t.status)).collect(),
            violations: verify(scenario, &report),
        });
    }
    Ok(SweepReport {
        scenario: scenario.doc.name.clone(),
        runs,
    })
}

/// Everything that must hold after a crash and full recovery.
pub fn verify(scenario: &Scenario, report: &RunReport) -> Vec<String> {
    let mut out = Vec::new();
    if !report.coordinator_up {
        out.push("coordinator still down after recovery".into());
        return out;
    }
    let status: BTreeMap<TxnId, TxnStatus> = report
        .transactions
        .iter()
        .filter_map(|t| t.status.map(|s| (t.id, s)))
        .collect();
    for t in &report.transactions {
        if !t.status.is_some_and(TxnStatus::is_terminal) {
            out.push(format!("transaction #{} unresolved ({:?})", t.id, t.status));
        }
    }
    check_atomicity(report, &status, &mut out);
    check_conservation(scenario, report, &status, &mut out);
    check_commit_order(report, &mut out);
    check_log_replay(report, &status, &mut out);
    check_declared(scenario, report, &mut out);
    out
}

fn check_atomicity(report: &RunReport, status: &BTreeMap<TxnId, TxnStatus>, out: &mut Vec<String>) {
    let mut applied: BTreeMap<TxnId, BTreeMap<&str, Vec<Applied>>> = BTreeMap::new();
    for e in &report.events {
        if let EventKind::Outcome { txn, rm, applied: a } = &e.kind {
            applied.entry(*txn).or_default().entry(rm.as_str()).or_default().push(*a);
        }
    }
    for t in &report.transactions {
        let seen = applied.get(&t.id);
        match status.get(&t.id) {
            Some(TxnStatus::Committed) => {
                for rm in &t.enlisted {
                    let got = seen.and_then(|m| m.get(rm.as_str()));
                    let ok = got.is_some_and(|v| !v.is_empty() && v.iter().all(|a| *a == Applied::Committed));
                    if !ok {
                        out.push(format!("split: #{} committed but {rm} applied {got:?}", t.id));
                    }
                }
            }
            Some(TxnStatus::Aborted) => {
                for (rm, v) in seen.into_iter().flatten() {
                    if v.contains(&Applied::Committed) {
                        out.push(format!("split: #{} aborted but {rm} committed it", t.id));
                    }
                }
            }
            _ => {}
        }
    }
}

fn check_conservation(
    scenario: &Scenario,
    report: &RunReport,
    status: &BTreeMap<TxnId, TxnStatus>,
    out: &mut Vec<String>,
) {
    let committed = |t: &TxnId| status.get(t) == Some(&TxnStatus::Committed);
    for decl in &scenario.doc.queues {
        let mut expected: BTreeMap<&str, i64> = BTreeMap::new();
        for m in &decl.initial {
            *expected.entry(m).or_default() += 1;
        }
        for e in &report.events {
            match &e.kind {
                EventKind::Send { queue, txn, message } if queue == &decl.name && committed(txn) => {
                    *expected.entry(message).or_default() += 1;
                }
                EventKind::Receive {
                    queue,
                    txn,
                    message: Some(message),
                } if queue == &decl.name && committed(txn) => {
                    *expected.entry(message).or_default() -= 1;
                }
                _ => {}
            }
        }
        expected.retain(|_, n| *n != 0);
        let mut actual: BTreeMap<&str, i64> = BTreeMap::new();
        for m in report.queues.get(&decl.name).into_iter().flatten() {
            *actual.entry(m).or_default() += 1;
        }
        if actual != expected {
            out.push(format!(
                "queue {} not conserved: expected {expected:?}, holds {actual:?}",
                decl.name
            ));
        }
    }
}

fn check_commit_order(report: &RunReport, out: &mut Vec<String>) {
    let mut decided: BTreeMap<TxnId, u64> = BTreeMap::new();
    for e in &report.events {
        match &e.kind {
            EventKind::LogWrite { record } => {
                if let Some(id) = record.strip_prefix("COMMIT\t").and_then(|t| t.parse().ok()) {
                    decided.entry(TxnId(id)).or_insert(e.at);
                }
            }
            EventKind::Outcome {
                txn,
                rm,
                applied: Applied::Committed,
            } if !decided.get(txn).is_some_and(|at| *at < e.at) => {
                out.push(format!("{rm} committed #{txn} before the COMMIT record"));
            }
            _ => {}
        }
    }
}

fn check_log_replay(report: &RunReport, status: &BTreeMap<TxnId, TxnStatus>, out: &mut Vec<String>) {
    let replayed = match replay(&report.coordinator_log) {
        Ok(r) => r.statuses(),
        Err(e) => {
            out.push(format!("coordinator log does not replay: {e}"));
            return;
        }
    };
    if &replayed != status {
        out.push(format!("log replay gives {replayed:?}, report says {status:?}"));
    }
}

fn check_declared(scenario: &Scenario, report: &RunReport, out: &mut Vec<String>) {
    for atomic in &scenario.doc.atomic {
        let status = report.txn(&atomic.txn).and_then(|t| t.status);
        let checks = match status {
            Some(TxnStatus::Committed) => &atomic.committed,
            // A transaction the crash prevented from beginning changed nothing.
            Some(TxnStatus::Aborted) | None => &atomic.aborted,
            Some(other) => {
                out.push(format!("{} left {other:?}", atomic.txn));
                continue;
            }
        };
        for check in checks {
            if let Some(problem) = failed(check, report) {
                out.push(format!("{} {:?}: {problem}", atomic.txn, status.unwrap_or(TxnStatus::Aborted)));
            }
        }
    }
}

fn failed(check: &Check, report: &RunReport) -> Option<String> {
    match check {
        Check::Store { store, key, equals } => {
            let actual = report.value(store, key);
            (actual != equals.as_deref()).then(|| format!("{store}[{key}] is {actual:?}, want {equals:?}"))
        }
        Check::Queue { queue, contents } => {
            let actual = report.queues.get(queue);
            (actual != Some(contents)).then(|| format!("{queue} holds {actual:?}, want {contents:?}"))
        }
        Check::Txn { txn, status } => {
            let actual = report.txn(txn).and_then(|t| t.status);
            (actual != Some(*status)).then(|| format!("{txn} is {actual:?}, want {status:?}"))
        }
        Check::Var { var, equals } => {
            let actual = report.variables.get(var);
            (actual != equals.as_ref()).then(|| format!("${var} is {actual:?}, want {equals:?}"))
        }
    }
}
