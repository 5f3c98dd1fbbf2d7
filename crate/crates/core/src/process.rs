//! Business processes: ordered steps calling business services, run under a
//! per-step or spanning transaction policy.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::component::{ComponentModel, ServiceRuntime};
use crate::sim::EventKind;
use crate::txn::{Coordinator, Outcome, TransactionContext};
use crate::value::{Fields, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxnPolicy {
    /// Each step commits on its own; a failure leaves earlier steps applied.
    #[default]
    PerStep,
    /// One transaction around every step.
    Spanning,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepTarget {
    Service { component: String, service: String },
    Process(String),
}

impl fmt::Display for StepTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepTarget::Service { component, service } => write!(f, "{component}.{service}"),
            StepTarget::Process(name) => write!(f, "process {name}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawStep", into = "RawStep")]
pub struct Step {
    pub name: String,
    pub target: StepTarget,
    /// Service request field ← process variable.
    pub input: BTreeMap<String, String>,
    /// Process variable ← service response field.
    pub output: BTreeMap<String, String>,
}

impl Step {
    pub fn service(name: &str, component: &str, service: &str) -> Self {
        Step {
            name: name.to_string(),
            target: StepTarget::Service {
                component: component.to_string(),
                service: service.to_string(),
            },
            input: BTreeMap::new(),
            output: BTreeMap::new(),
        }
    }

    pub fn process(name: &str, child: &str) -> Self {
        Step {
            name: name.to_string(),
            target: StepTarget::Process(child.to_string()),
            input: BTreeMap::new(),
            output: BTreeMap::new(),
        }
    }

    pub fn input(mut self, field: &str, variable: &str) -> Self {
        self.input.insert(field.to_string(), variable.to_string());
        self
    }

    pub fn output(mut self, variable: &str, field: &str) -> Self {
        self.output.insert(variable.to_string(), field.to_string());
        self
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStep {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    service: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    process: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    input: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    output: BTreeMap<String, String>,
}

impl TryFrom<RawStep> for Step {
    type Error = String;

    fn try_from(raw: RawStep) -> Result<Self, Self::Error> {
        let target = match (raw.service, raw.process) {
            (Some(s), None) => match s.split_once('.') {
                Some((c, svc)) if !c.is_empty() && !svc.is_empty() => StepTarget::Service {
                    component: c.to_string(),
                    service: svc.to_string(),
                },
                _ => return Err(format!("step `{}`: service must be `Component.service`", raw.name)),
            },
            (None, Some(p)) => StepTarget::Process(p),
            _ => return Err(format!("step `{}` needs exactly one of `service` or `process`", raw.name)),
        };
        Ok(Step {
            name: raw.name,
            target,
            input: raw.input,
            output: raw.output,
        })
    }
}

impl From<Step> for RawStep {
    fn from(step: Step) -> Self {
        let (service, process) = match step.target {
            StepTarget::Service { component, service } => (Some(format!("{component}.{service}")), None),
            StepTarget::Process(p) => (None, Some(p)),
        };
        RawStep {
            name: step.name,
            service,
            process,
            input: step.input,
            output: step.output,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessDefinition {
    pub name: String,
    /// Logical component recorded as the originator of the process's
    /// transactions; defaults to the process name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub owner: Option<String>,
    /// Variables supplied when an instance starts.
    #[serde(default)]
    pub variables: Vec<String>,
    #[serde(default)]
    pub steps: Vec<Step>,
    #[serde(default)]
    pub txn_policy: TxnPolicy,
}

impl ProcessDefinition {
    pub fn new(name: &str, txn_policy: TxnPolicy) -> Self {
        ProcessDefinition {
            name: name.to_string(),
            owner: None,
            variables: Vec::new(),
            steps: Vec::new(),
            txn_policy,
        }
    }

    pub fn with_variables(mut self, vars: &[&str]) -> Self {
        self.variables = vars.iter().map(|v| v.to_string()).collect();
        self
    }

    pub fn step(mut self, step: Step) -> Self {
        self.steps.push(step);
        self
    }

    fn originator(&self) -> &str {
        self.owner.as_deref().unwrap_or(&self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProcessError {
    #[error("unknown process `{0}`")]
    UnknownProcess(String),
    #[error("process `{process}` has two steps named `{step}`")]
    DuplicateStep { process: String, step: String },
    #[error("process `{0}` would contain itself")]
    Cycle(String),
    #[error("process `{process}` step `{step}`: {reason}")]
    Unresolved { process: String, step: String, reason: String },
    #[error("position {position} is outside process `{process}` ({len} steps)")]
    Position { process: String, position: usize, len: usize },
}

/// A step after composition has been flattened away.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlatStep {
    /// Path through nested processes, e.g. `onboard/check`.
    pub path: String,
    pub component: String,
    pub service: String,
    pub input: BTreeMap<String, String>,
    pub output: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum InstanceState {
    Running,
    Completed,
    Failed { step: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProcessInstance {
    pub definition: String,
    pub variables: BTreeMap<String, String>,
    pub cursor: usize,
    pub state: InstanceState,
    /// Steps whose service call returned, in execution order.
    pub history: Vec<String>,
    #[serde(skip)]
    originator: String,
    #[serde(skip)]
    policy: TxnPolicy,
    #[serde(skip)]
    plan: Vec<FlatStep>,
}

impl ProcessInstance {
    pub fn is_terminal(&self) -> bool {
        self.state != InstanceState::Running
    }

    pub fn plan(&self) -> &[FlatStep] {
        &self.plan
    }
}

/// Stores process definitions and runs instances of them.
#[derive(Debug, Clone, Default)]
pub struct ProcessEngine {
    definitions: BTreeMap<String, ProcessDefinition>,
}

impl ProcessEngine {
    pub fn new() -> Self {
        ProcessEngine::default()
    }

    pub fn definition(&self, name: &str) -> Option<&ProcessDefinition> {
        self.definitions.get(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.definitions.keys().cloned().collect()
    }

    /// Stores a definition after checking step names, bindings, nesting and
    /// variable flow. Sub-processes must already be defined.
    pub fn define(&mut self, model: &ComponentModel, def: ProcessDefinition) -> Result<(), ProcessError> {
        self.check(model, &def)?;
        self.definitions.insert(def.name.clone(), def);
        Ok(())
    }

    /// Embeds `child` as a step of `parent` at `position`.
    pub fn compose(
        &mut self,
        model: &ComponentModel,
        parent: &str,
        position: usize,
        child: &str,
    ) -> Result<ProcessDefinition, ProcessError> {
        let mut def = self
            .definitions
            .get(parent)
            .cloned()
            .ok_or_else(|| ProcessError::UnknownProcess(parent.to_string()))?;
        if position > def.steps.len() {
            return Err(ProcessError::Position {
                process: parent.to_string(),
                position,
                len: def.steps.len(),
            });
        }
        def.steps.insert(position, Step::process(child, child));
        self.check(model, &def)?;
        self.definitions.insert(parent.to_string(), def.clone());
        Ok(def)
    }

    fn check(&self, model: &ComponentModel, def: &ProcessDefinition) -> Result<(), ProcessError> {
        let mut names = BTreeSet::new();
        for step in &def.steps {
            if !names.insert(step.name.as_str()) {
                return Err(ProcessError::DuplicateStep {
                    process: def.name.clone(),
                    step: step.name.clone(),
                });
            }
        }
        let plan = self.flatten_def(def, &mut vec![def.name.clone()])?;
        let mut known: BTreeSet<&str> = def.variables.iter().map(String::as_str).collect();
        for step in &plan {
            let unresolved = |reason: String| ProcessError::Unresolved {
                process: def.name.clone(),
                step: step.path.clone(),
                reason,
            };
            let sig = model
                .signature(&step.component, &step.service)
                .map_err(|e| unresolved(e.to_string()))?;
            for (field, var) in &step.input {
                if !sig.request.iter().any(|d| &d.name == field) {
                    return Err(unresolved(format!("`{}` has no request field `{field}`", step.service)));
                }
                if !known.contains(var.as_str()) {
                    return Err(unresolved(format!("variable `{var}` is not set before this step")));
                }
            }
            for (var, field) in &step.output {
                if !sig.response.iter().any(|d| &d.name == field) {
                    return Err(unresolved(format!("`{}` has no response field `{field}`", step.service)));
                }
                known.insert(var);
            }
        }
        Ok(())
    }

    fn flatten_def(&self, def: &ProcessDefinition, stack: &mut Vec<String>) -> Result<Vec<FlatStep>, ProcessError> {
        let mut out = Vec::new();
        for step in &def.steps {
            match &step.target {
                StepTarget::Service { component, service } => out.push(FlatStep {
                    path: format!("{}/{}", stack[1..].join("/"), step.name)
                        .trim_start_matches('/')
                        .to_string(),
                    component: component.clone(),
                    service: service.clone(),
                    input: step.input.clone(),
                    output: step.output.clone(),
                }),
                StepTarget::Process(child) => {
                    if stack.contains(child) {
                        return Err(ProcessError::Cycle(child.clone()));
                    }
                    if !step.input.is_empty() || !step.output.is_empty() {
                        return Err(ProcessError::Unresolved {
                            process: def.name.clone(),
                            step: step.name.clone(),
                            reason: "sub-process steps share the parent's variables and take no mappings".into(),
                        });
                    }
                    let child_def = self.definitions.get(child).ok_or_else(|| ProcessError::Unresolved {
                        process: def.name.clone(),
                        step: step.name.clone(),
                        reason: format!("unknown process `{child}`"),
                    })?;
                    stack.push(child.clone());
                    out.extend(self.flatten_def(child_def, stack)?);
                    stack.pop();
                }
            }
        }
        Ok(out)
    }

    /// The flattened step list of a stored process.
    pub fn flatten(&self, name: &str) -> Result<Vec<FlatStep>, ProcessError> {
        let def = self
            .definitions
            .get(name)
            .ok_or_else(|| ProcessError::UnknownProcess(name.to_string()))?;
        self.flatten_def(def, &mut vec![name.to_string()])
    }

    /// A fresh instance bound to the current definition of `name`.
    pub fn instantiate(&self, name: &str, variables: BTreeMap<String, String>) -> Result<ProcessInstance, ProcessError> {
        let def = self
            .definitions
            .get(name)
            .ok_or_else(|| ProcessError::UnknownProcess(name.to_string()))?;
        Ok(ProcessInstance {
            definition: name.to_string(),
            variables,
            cursor: 0,
            state: InstanceState::Running,
            history: Vec::new(),
            originator: def.originator().to_string(),
            policy: def.txn_policy,
            plan: self.flatten(name)?,
        })
    }

    /// Runs an instance to a terminal state.
    pub fn execute(mut instance: ProcessInstance, coordinator: &Coordinator, runtime: &ServiceRuntime) -> ProcessInstance {
        if instance.is_terminal() {
            return instance;
        }
        let mut spanning: Option<TransactionContext> = None;
        while instance.cursor < instance.plan.len() {
            let step = instance.plan[instance.cursor].clone();
            runtime.trace().record(EventKind::ProcessStep {
                process: instance.definition.clone(),
                step: step.path.clone(),
            });
            let ctx = match (&spanning, instance.policy) {
                (Some(ctx), _) => ctx.clone(),
                (None, policy) => match coordinator.begin(&instance.originator) {
                    Ok(ctx) => {
                        if policy == TxnPolicy::Spanning {
                            spanning = Some(ctx.clone());
                        }
                        ctx
                    }
                    Err(e) => return fail(instance, &step.path, e.to_string()),
                },
            };
            let request: Fields = step
                .input
                .iter()
                .map(|(field, var)| (field.clone(), Value::Text(instance.variables.get(var).cloned().unwrap_or_default())))
                .collect();
            let response = match runtime.call(Some(&ctx), &step.component, &step.service, &request) {
                Ok(r) => r,
                Err(e) => {
                    let _ = coordinator.rollback(&ctx);
                    return fail(instance, &step.path, e.to_string());
                }
            };
            if instance.policy == TxnPolicy::PerStep {
                match coordinator.commit(&ctx) {
                    Ok(Outcome::Committed) => {}
                    Ok(Outcome::Aborted) => return fail(instance, &step.path, "transaction aborted".into()),
                    Err(e) => return fail(instance, &step.path, e.to_string()),
                }
            }
            for (var, field) in &step.output {
                if let Some(v) = response.get(field) {
                    instance.variables.insert(var.clone(), v.to_string());
                }
            }
            instance.history.push(step.path.clone());
            instance.cursor += 1;
        }
        if let Some(ctx) = spanning {
            let last = instance.plan.last().map(|s| s.path.clone()).unwrap_or_default();
            match coordinator.commit(&ctx) {
                Ok(Outcome::Committed) => {}
                Ok(Outcome::Aborted) => return fail(instance, &last, "transaction aborted".into()),
                Err(e) => return fail(instance, &last, e.to_string()),
            }
        }
        instance.state = InstanceState::Completed;
        instance
    }
}

fn fail(mut instance: ProcessInstance, step: &str, reason: String) -> ProcessInstance {
    instance.state = InstanceState::Failed {
        step: step.to_string(),
        reason,
    };
    instance
}
