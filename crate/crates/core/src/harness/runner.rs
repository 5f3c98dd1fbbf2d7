//! Executes a scenario against a freshly built world and collects a report.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::report::{AssertionResult, ActionError, ProcessReport, RunReport, StoreValue, TxnReport};
use super::scenario::{Action, ActionSpec, Check, Expect, ProcessExpect, Scenario, ScriptStep, ServiceScript};
use crate::broker::{Broker, LegacyEndpoint};
use crate::component::{CallError, Invocation, ServiceRuntime};
use crate::log::DurableLog;
use crate::process::{InstanceState, ProcessEngine};
use crate::rm::{ManagedStore, ResourceManager, TxnQueue};
use crate::sim::{EventKind, Trace};
use crate::txn::{propagate, Coordinator, FaultSpec, FaultTarget, Outcome, TransactionContext, TxnError, TxnStatus};
use crate::value::{Fields, Value};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Overrides the scenario's seed.
    pub seed: Option<u64>,
    pub faults: Vec<FaultSpec>,
    /// When false, `assert` actions and commit/process expectations are
    /// skipped. The crash sweep runs this way.
    pub skip_asserts: bool,
    /// Restart everything that is down once the actions are exhausted.
    pub recover_at_end: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("fault `{0}` names neither the coordinator nor a declared resource manager")]
    UnknownFaultTarget(String),
    #[error("setting up the run: {0}")]
    Setup(String),
}

struct Resources {
    stores: BTreeMap<String, Arc<ManagedStore>>,
    queues: BTreeMap<String, Arc<TxnQueue>>,
    broker: Arc<Broker>,
}

impl Resources {
    fn rm(&self, id: &str) -> Option<Arc<dyn ResourceManager>> {
        if let Some(s) = self.stores.get(id) {
            return Some(s.clone());
        }
        self.queues.get(id).map(|q| q.clone() as Arc<dyn ResourceManager>)
    }

    fn all_rms(&self) -> Vec<Arc<dyn ResourceManager>> {
        self.stores
            .values()
            .map(|s| s.clone() as Arc<dyn ResourceManager>)
            .chain(self.queues.values().map(|q| q.clone() as Arc<dyn ResourceManager>))
            .collect()
    }
}

/// Replaces `{name}` with the value bound to `name`.
pub fn expand(template: &str, vars: &BTreeMap<String, String>) -> Result<String, String> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after
            .find('}')
            .ok_or_else(|| format!("unclosed placeholder in `{template}`"))?;
        let name = &after[..close];
        let value = vars
            .get(name)
            .ok_or_else(|| format!("`{name}` is not bound in `{template}`"))?;
        out.push_str(value);
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn expand_map(map: &BTreeMap<String, String>, vars: &BTreeMap<String, String>) -> Result<Fields, String> {
    map.iter()
        .map(|(k, t)| Ok((k.clone(), Value::Text(expand(t, vars)?))))
        .collect()
}

fn bind_fields(vars: &mut BTreeMap<String, String>, prefix: &str, fields: &Fields) {
    for (name, value) in fields {
        vars.insert(format!("{prefix}.{name}"), value.to_string());
    }
}

fn text(bytes: Vec<u8>) -> String {
    String::from_utf8_lossy(&bytes).into_owned()
}

fn run_script(
    script: &ServiceScript,
    resources: &Resources,
    inv: &Invocation<'_>,
    request: &Fields,
) -> Result<Fields, CallError> {
    let mut locals: BTreeMap<String, String> = request.iter().map(|(k, v)| (k.clone(), v.to_string())).collect();
    let x = |t: &str, locals: &BTreeMap<String, String>| expand(t, locals).map_err(CallError::Failed);
    let need_ctx = || {
        inv.ctx.ok_or_else(|| {
            CallError::Failed(format!(
                "`{}.{}` touches a resource outside a transaction",
                inv.component, inv.service
            ))
        })
    };
    for step in &script.steps {
        match step {
            ScriptStep::Put { store, key, value } => {
                resources.stores[store].put(need_ctx()?, &x(key, &locals)?, x(value, &locals)?)?;
            }
            ScriptStep::Get { store, key, into } => {
                match resources.stores[store].get(need_ctx()?, &x(key, &locals)?)? {
                    Some(v) => locals.insert(into.clone(), text(v)),
                    None => locals.remove(into),
                };
            }
            ScriptStep::Delete { store, key } => {
                resources.stores[store].delete(need_ctx()?, &x(key, &locals)?)?;
            }
            ScriptStep::Send { queue, message } => {
                resources.queues[queue].send(need_ctx()?, x(message, &locals)?)?;
            }
            ScriptStep::Receive { queue, into } => {
                match resources.queues[queue].receive(need_ctx()?)? {
                    Some(m) => locals.insert(into.clone(), text(m)),
                    None => locals.remove(into),
                };
            }
            ScriptStep::Call {
                component,
                service,
                request,
                into,
            } => {
                let req = expand_map(request, &locals).map_err(CallError::Failed)?;
                let reply = if component == inv.component {
                    inv.runtime.call(inv.ctx, component, service, &req)?
                } else {
                    let ctx = inv.ctx.ok_or_else(|| {
                        CallError::Failed(format!("cross-component call to `{component}.{service}` needs a transaction"))
                    })?;
                    propagate(ctx, inv.runtime, (component, service), &req)?
                };
                if let Some(prefix) = into {
                    bind_fields(&mut locals, prefix, &reply);
                }
            }
            ScriptStep::Invoke { service, request, into } => {
                let req = expand_map(request, &locals).map_err(CallError::Failed)?;
                let reply = resources
                    .broker
                    .invoke(service, &req)
                    .map_err(|e| CallError::Failed(e.to_string()))?;
                if let Some(prefix) = into {
                    bind_fields(&mut locals, prefix, &reply);
                }
            }
            ScriptStep::Set { var, value } => {
                let v = x(value, &locals)?;
                locals.insert(var.clone(), v);
            }
            ScriptStep::Fail { message } => return Err(CallError::Failed(x(message, &locals)?)),
        }
    }
    expand_map(&script.response, &locals).map_err(CallError::Failed)
}

struct World {
    trace: Trace,
    coord: Coordinator,
    resources: Arc<Resources>,
    runtime: ServiceRuntime,
    engine: ProcessEngine,
    broker_queues: BTreeSet<String>,
}

impl World {
    fn build(scenario: &Scenario) -> Result<World, RunError> {
        let setup = |e: String| RunError::Setup(e);
        let trace = Trace::new();
        let coord = Coordinator::new(DurableLog::in_memory(), trace.clone()).map_err(|e| setup(e.to_string()))?;
        let mut stores = BTreeMap::new();
        for decl in &scenario.doc.stores {
            let store = Arc::new(ManagedStore::in_memory(decl.name.clone(), trace.clone()));
            for (k, v) in &decl.initial {
                store.seed(k, v.as_bytes()).map_err(|e| setup(e.to_string()))?;
            }
            coord.register(store.clone()).map_err(|e| setup(e.to_string()))?;
            stores.insert(decl.name.clone(), store);
        }
        let mut queues = BTreeMap::new();
        for decl in &scenario.doc.queues {
            let queue = Arc::new(TxnQueue::in_memory(decl.name.clone(), trace.clone()));
            for m in &decl.initial {
                queue.seed(m.as_bytes());
            }
            coord.register(queue.clone()).map_err(|e| setup(e.to_string()))?;
            queues.insert(decl.name.clone(), queue);
        }
        let broker = Arc::new(Broker::new(trace.clone()));
        for def in &scenario.endpoints {
            broker
                .add_endpoint(Arc::new(LegacyEndpoint::new(def.clone())), scenario.endpoint_timeout)
                .map_err(|e| setup(e.to_string()))?;
        }
        for table in &scenario.tables {
            broker.register_table(table.clone()).map_err(|e| setup(e.to_string()))?;
        }
        let resources = Arc::new(Resources { stores, queues, broker });

        let model = Arc::new(scenario.model.clone());
        let mut runtime = ServiceRuntime::new(model.clone(), trace.clone());
        for (key, script) in &scenario.doc.services {
            let (component, service) = key.split_once('.').expect("validated service key");
            let script = script.clone();
            let res = resources.clone();
            runtime
                .register(component, service, move |inv: &Invocation<'_>, req: &Fields| {
                    run_script(&script, &res, inv, req)
                })
                .map_err(|e| setup(e.to_string()))?;
        }
        let mut engine = ProcessEngine::new();
        for def in &scenario.processes {
            engine.define(&model, def.clone()).map_err(|e| setup(e.to_string()))?;
        }
        Ok(World {
            trace,
            coord,
            resources,
            runtime,
            engine,
            broker_queues: scenario.broker_queues(),
        })
    }

    /// Lets the broker answer every committed request.
    fn pump(&self) -> Result<(), String> {
        if self.broker_queues.is_empty() || !self.coord.is_up() {
            return Ok(());
        }
        if self.resources.all_rms().iter().any(|rm| !rm.is_available()) {
            return Ok(());
        }
        for name in &self.broker_queues {
            let queues = &self.resources.queues;
            self.resources
                .broker
                .serve(&self.coord, &queues[name], |id| queues.get(id).cloned())
                .map_err(|e| format!("broker serving `{name}`: {e}"))?;
        }
        Ok(())
    }

    fn recover(&self) -> Result<(), String> {
        for rm in self.resources.all_rms() {
            if !rm.is_available() {
                rm.recover().map_err(|e| e.to_string())?;
            }
        }
        self.coord.recover().map_err(|e| e.to_string())?;
        Ok(())
    }

    fn status(&self, ctx: &TransactionContext) -> Option<TxnStatus> {
        self.coord.status(ctx.id())
    }
}

struct Run<'s> {
    scenario: &'s Scenario,
    options: &'s RunOptions,
    world: World,
    rng: ChaCha8Rng,
    txns: BTreeMap<String, TransactionContext>,
    txn_order: Vec<String>,
    variables: BTreeMap<String, String>,
    assertions: Vec<AssertionResult>,
    errors: Vec<ActionError>,
    processes: Vec<ProcessReport>,
    /// Commit expectations cut short by an injected crash: (assertion, txn,
    /// wanted status), settled against the final status.
    in_doubt: Vec<(usize, String, TxnStatus)>,
    step: usize,
}

/// Orders interleaved groups: repeatedly draws a group with actions left and
/// takes its next action.
pub fn schedule(groups: &[Vec<ActionSpec>], rng: &mut impl Rng) -> Vec<ActionSpec> {
    let mut cursors = vec![0usize; groups.len()];
    let mut out = Vec::with_capacity(groups.iter().map(Vec::len).sum());
    loop {
        let live: Vec<usize> = (0..groups.len()).filter(|&g| cursors[g] < groups[g].len()).collect();
        if live.is_empty() {
            return out;
        }
        let g = live[rng.gen_range(0..live.len())];
        out.push(groups[g][cursors[g]].clone());
        cursors[g] += 1;
    }
}

impl Run<'_> {
    fn ctx(&self, txn: &str) -> Result<&TransactionContext, String> {
        self.txns.get(txn).ok_or_else(|| format!("transaction `{txn}` was not begun"))
    }

    fn check(&mut self, check: &Check) {
        let (passed, detail) = self.evaluate(check);
        self.assertions.push(AssertionResult {
            index: self.step,
            check: describe(check),
            passed,
            detail,
        });
    }

    fn expectation(&mut self, what: String, passed: bool, detail: String) {
        self.assertions.push(AssertionResult {
            index: self.step,
            check: what,
            passed,
            detail,
        });
    }

    fn evaluate(&self, check: &Check) -> (bool, String) {
        let res = &self.world.resources;
        match check {
            Check::Store { store, key, equals } => {
                let actual = res.stores[store].committed(key).map(text);
                (&actual == equals, format!("found {}", show(&actual)))
            }
            Check::Queue { queue, contents } => {
                let actual: Vec<String> = res.queues[queue].messages().into_iter().map(text).collect();
                (&actual == contents, format!("found {actual:?}"))
            }
            Check::Txn { txn, status } => match self.txns.get(txn) {
                None => (false, format!("transaction `{txn}` was not begun")),
                Some(ctx) => {
                    let actual = self.world.status(ctx);
                    (actual == Some(*status), format!("found {}", show_status(actual)))
                }
            },
            Check::Var { var, equals } => {
                let actual = self.variables.get(var).cloned();
                (&actual == equals, format!("found {}", show(&actual)))
            }
        }
    }

    fn execute_all(&mut self, actions: &[ActionSpec]) {
        for spec in actions {
            if let Action::Interleave { groups } = &spec.action {
                let order = schedule(groups, &mut self.rng);
                self.execute_all(&order);
                continue;
            }
            self.step += 1;
            let result = self.execute(&spec.action);
            match (result, spec.expect_error) {
                (Ok(()), false) => {}
                (Ok(()), true) => {
                    if !self.options.skip_asserts {
                        self.expectation(format!("{} fails", spec.action.op()), false, "it succeeded".into());
                    }
                }
                (Err(error), expected) => {
                    self.world.trace.record(EventKind::ActionFailed {
                        index: self.step,
                        op: spec.action.op().into(),
                        error: error.clone(),
                    });
                    self.errors.push(ActionError {
                        index: self.step,
                        op: spec.action.op().into(),
                        error,
                        expected,
                    });
                }
            }
        }
    }

    fn execute(&mut self, action: &Action) -> Result<(), String> {
        let res = self.world.resources.clone();
        let err = |e: &dyn std::fmt::Display| e.to_string();
        match action {
            Action::Begin { txn, originator } => {
                if self.txns.contains_key(txn) {
                    return Err(format!("transaction `{txn}` already begun"));
                }
                let ctx = self
                    .world
                    .coord
                    .begin(originator.as_deref().unwrap_or("harness"))
                    .map_err(|e| err(&e))?;
                self.txns.insert(txn.clone(), ctx);
                self.txn_order.push(txn.clone());
            }
            Action::Put { txn, store, key, value } => {
                res.stores[store].put(self.ctx(txn)?, key, value.as_bytes()).map_err(|e| err(&e))?;
            }
            Action::Get { txn, store, key, into } => {
                let v = res.stores[store].get(self.ctx(txn)?, key).map_err(|e| err(&e))?;
                if let Some(var) = into {
                    match v {
                        Some(v) => self.variables.insert(var.clone(), text(v)),
                        None => self.variables.remove(var),
                    };
                }
            }
            Action::Delete { txn, store, key } => {
                res.stores[store].delete(self.ctx(txn)?, key).map_err(|e| err(&e))?;
            }
            Action::Send { txn, queue, message } => {
                res.queues[queue].send(self.ctx(txn)?, message.as_bytes()).map_err(|e| err(&e))?;
            }
            Action::Receive { txn, queue, into } => {
                let m = res.queues[queue].receive(self.ctx(txn)?).map_err(|e| err(&e))?;
                if let Some(var) = into {
                    match m {
                        Some(m) => self.variables.insert(var.clone(), text(m)),
                        None => self.variables.remove(var),
                    };
                }
            }
            Action::Invoke { service, request, into } => {
                let reply = res.broker.invoke(service, request).map_err(|e| err(&e))?;
                if let Some(prefix) = into {
                    bind_fields(&mut self.variables, prefix, &reply);
                }
            }
            Action::InvokeViaQueue {
                txn,
                queue,
                service,
                request,
                reply_to,
            } => {
                res.broker
                    .invoke_via_queue(self.ctx(txn)?, &res.queues[queue], service, request, &res.queues[reply_to])
                    .map_err(|e| err(&e))?;
            }
            Action::Propagate {
                txn,
                component,
                service,
                request,
                into,
            } => {
                let reply = propagate(self.ctx(txn)?, &self.world.runtime, (component, service), request).map_err(|e| err(&e))?;
                if let Some(prefix) = into {
                    bind_fields(&mut self.variables, prefix, &reply);
                }
            }
            Action::Commit { txn, expect } => {
                let outcome = self.world.coord.commit(self.ctx(txn)?);
                if let (Some(expect), false) = (expect, self.options.skip_asserts) {
                    let wanted = match expect {
                        Expect::Committed => Outcome::Committed,
                        Expect::Aborted => Outcome::Aborted,
                    };
                    let detail = match &outcome {
                        Ok(o) => format!("outcome {}", outcome_name(*o)),
                        Err(e) => e.to_string(),
                    };
                    let passed = matches!(outcome, Ok(o) if o == wanted);
                    if let Err(TxnError::Crashed(_)) = &outcome {
                        let status = match wanted {
                            Outcome::Committed => TxnStatus::Committed,
                            Outcome::Aborted => TxnStatus::Aborted,
                        };
                        self.in_doubt.push((self.assertions.len(), txn.clone(), status));
                    }
                    self.expectation(format!("commit `{txn}` is {}", outcome_name(wanted)), passed, detail);
                }
                let outcome = outcome.map_err(|e| err(&e));
                self.world.pump()?;
                outcome?;
            }
            Action::Rollback { txn } => {
                let outcome = self.world.coord.rollback(self.ctx(txn)?).map_err(|e| err(&e));
                self.world.pump()?;
                outcome?;
            }
            Action::RunProcess {
                process,
                variables,
                expect,
            } => {
                let instance = self
                    .world
                    .engine
                    .instantiate(process, variables.clone())
                    .map_err(|e| err(&e))?;
                let done = ProcessEngine::execute(instance, &self.world.coord, &self.world.runtime);
                for (k, v) in &done.variables {
                    self.variables.insert(format!("{process}.{k}"), v.clone());
                }
                self.processes.push(ProcessReport {
                    index: self.step,
                    process: process.clone(),
                    state: done.state.clone(),
                    variables: done.variables.clone(),
                    history: done.history.clone(),
                });
                if let (Some(expect), false) = (expect, self.options.skip_asserts) {
                    let (passed, wanted) = match expect {
                        ProcessExpect::Completed => (done.state == InstanceState::Completed, "completed"),
                        ProcessExpect::Failed => (matches!(done.state, InstanceState::Failed { .. }), "failed"),
                    };
                    let detail = serde_json::to_string(&done.state).expect("state serializes");
                    self.expectation(format!("process `{process}` is {wanted}"), passed, detail);
                }
                self.world.pump()?;
                if let InstanceState::Failed { step, reason } = done.state {
                    return Err(format!("process `{process}` failed at `{step}`: {reason}"));
                }
            }
            Action::Crash { target } => {
                if target == "coordinator" {
                    self.world.coord.crash();
                } else {
                    res.rm(target).expect("validated target").crash();
                }
            }
            Action::Recover {} => {
                self.world.recover()?;
                self.world.pump()?;
            }
            Action::Assert(check) => {
                if !self.options.skip_asserts {
                    self.check(check);
                }
            }
            Action::Interleave { .. } => unreachable!("expanded by execute_all"),
            Action::DelayPrepare { rm, units } => self.world.coord.set_prepare_latency(rm, *units),
        }
        Ok(())
    }

    fn finish(mut self) -> RunReport {
        let world = &self.world;
        if self.options.recover_at_end {
            self.step += 1;
            if let Err(error) = world.recover().and_then(|_| world.pump()) {
                self.errors.push(ActionError {
                    index: self.step,
                    op: "recover".into(),
                    error,
                    expected: false,
                });
            }
        }
        for (i, txn, wanted) in std::mem::take(&mut self.in_doubt) {
            let status = world.status(&self.txns[&txn]);
            let a = &mut self.assertions[i];
            a.passed = status == Some(wanted);
            a.detail = format!("{}; after recovery {}", a.detail, show_status(status));
        }
        let names: BTreeMap<_, _> = self.txns.iter().map(|(n, c)| (c.id(), n.clone())).collect();
        let mut transactions: Vec<TxnReport> = if world.coord.is_up() {
            world
                .coord
                .transactions()
                .into_iter()
                .map(|t| TxnReport {
                    name: names.get(&t.id).cloned(),
                    id: t.id,
                    status: Some(t.status),
                    enlisted: t.enlisted,
                })
                .collect()
        } else {
            Vec::new()
        };
        for name in &self.txn_order {
            let ctx = &self.txns[name];
            if !transactions.iter().any(|t| t.id == ctx.id()) {
                transactions.push(TxnReport {
                    name: Some(name.clone()),
                    id: ctx.id(),
                    status: world.status(ctx),
                    enlisted: ctx.enlisted(),
                });
            }
        }
        transactions.sort_by_key(|t| t.id);

        let res = &world.resources;
        let stores = res
            .stores
            .iter()
            .map(|(name, s)| {
                let entries = s
                    .entries()
                    .into_iter()
                    .map(|(k, e)| {
                        (
                            k,
                            StoreValue {
                                value: e.value.map(text),
                                version: e.version,
                            },
                        )
                    })
                    .collect();
                (name.clone(), entries)
            })
            .collect();
        let queues = res
            .queues
            .iter()
            .map(|(name, q)| (name.clone(), q.messages().into_iter().map(text).collect()))
            .collect();
        let unexpected = self.errors.iter().any(|e| !e.expected);
        let passed = self.assertions.iter().all(|a| a.passed) && (!unexpected || !self.options.faults.is_empty());
        RunReport {
            scenario: self.scenario.doc.name.clone(),
            seed: self.options.seed.unwrap_or(self.scenario.doc.seed),
            faults: self.options.faults.iter().map(ToString::to_string).collect(),
            fired_faults: world.coord.fired_faults().iter().map(ToString::to_string).collect(),
            passed,
            assertions: self.assertions,
            errors: self.errors,
            transactions,
            stores,
            queues,
            processes: self.processes,
            variables: self.variables,
            coordinator_up: world.coord.is_up(),
            coordinator_log: world.coord.log().lines(),
            events: world.trace.events(),
        }
    }
}

fn outcome_name(o: Outcome) -> &'static str {
    match o {
        Outcome::Committed => "committed",
        Outcome::Aborted => "aborted",
    }
}

fn show(v: &Option<String>) -> String {
    match v {
        Some(s) => format!("{s:?}"),
        None => "nothing".into(),
    }
}

fn show_status(s: Option<TxnStatus>) -> String {
    match s {
        Some(s) => serde_json::to_value(s).expect("status serializes").as_str().unwrap_or("?").to_string(),
        None => "unknown (coordinator down)".into(),
    }
}

fn describe(check: &Check) -> String {
    match check {
        Check::Store { store, key, equals } => format!("{store}[{key}] == {}", show(equals)),
        Check::Queue { queue, contents } => format!("{queue} holds {contents:?}"),
        Check::Txn { txn, status } => format!("{txn} is {}", show_status(Some(*status))),
        Check::Var { var, equals } => format!("${var} == {}", show(equals)),
    }
}

/// Runs a scenario once. The result is a pure function of the scenario, the
/// effective seed and the faults.
pub fn run_scenario(scenario: &Scenario, options: &RunOptions) -> Result<RunReport, RunError> {
    let rms = scenario.resource_ids();
    for fault in &options.faults {
        if let FaultTarget::Rm(id) = &fault.target {
            if !rms.contains(id) {
                return Err(RunError::UnknownFaultTarget(fault.to_string()));
            }
        }
    }
    let world = World::build(scenario)?;
    for fault in &options.faults {
        world.coord.arm_fault(fault.clone());
    }
    let seed = options.seed.unwrap_or(scenario.doc.seed);
    let mut run = Run {
        scenario,
        options,
        world,
        rng: ChaCha8Rng::seed_from_u64(seed),
        txns: BTreeMap::new(),
        txn_order: Vec::new(),
        variables: BTreeMap::new(),
        assertions: Vec::new(),
        errors: Vec::new(),
        processes: Vec::new(),
        in_doubt: Vec::new(),
        step: 0,
    };
    run.execute_all(&scenario.doc.actions);
    Ok(run.finish())
}

