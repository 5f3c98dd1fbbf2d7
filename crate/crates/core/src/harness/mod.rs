//! Deterministic scenario runner, fault injector and crash sweep.

mod report;
mod runner;
mod scenario;
mod sweep;

pub use report::{ActionError, AssertionResult, ProcessReport, RunReport, StoreValue, TxnReport};
pub use runner::{expand, run_scenario, schedule, RunError, RunOptions};
pub use scenario::{
    visit, Action, ActionSpec, AtomicCheck, Check, Expect, ProcessExpect, QueueDecl, Scenario, ScenarioDoc,
    ScenarioError, ScriptStep, ServiceScript, StoreDecl,
};
pub use sweep::{combinations, crash_sweep, verify, SweepReport, SweepRun};
