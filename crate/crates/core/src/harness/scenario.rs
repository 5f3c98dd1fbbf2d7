//! Scenario documents: the declarative input of a harness run.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::broker::{BrokerTable, EndpointDef, DEFAULT_TIMEOUT};
use crate::component::{load_manifest, ComponentModel};
use crate::process::ProcessDefinition;
use crate::txn::TxnStatus;
use crate::value::Fields;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreDecl {
    pub name: String,
    #[serde(default)]
    pub initial: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueueDecl {
    pub name: String,
    #[serde(default)]
    pub initial: Vec<String>,
}

/// A check against observable state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum Check {
    /// Committed value of a key; `null` means absent.
    Store {
        store: String,
        key: String,
        equals: Option<String>,
    },
    /// Committed queue contents, head first.
    Queue { queue: String, contents: Vec<String> },
    Txn { txn: String, status: TxnStatus },
    /// A harness variable; `null` means unset.
    Var { var: String, equals: Option<String> },
}

/// Expected final state of a transaction under the crash sweep, keyed by
/// the outcome the transaction actually reached.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomicCheck {
    pub txn: String,
    #[serde(default)]
    pub committed: Vec<Check>,
    #[serde(default)]
    pub aborted: Vec<Check>,
}

/// One step of a scripted service implementation. Strings may contain
/// `{name}` placeholders filled from request fields and script locals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "do", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScriptStep {
    Put { store: String, key: String, value: String },
    Get { store: String, key: String, into: String },
    Delete { store: String, key: String },
    Send { queue: String, message: String },
    Receive { queue: String, into: String },
    /// Another service; cross-component calls propagate the transaction.
    Call {
        component: String,
        service: String,
        #[serde(default)]
        request: BTreeMap<String, String>,
        #[serde(default)]
        into: Option<String>,
    },
    Invoke {
        service: String,
        #[serde(default)]
        request: BTreeMap<String, String>,
        #[serde(default)]
        into: Option<String>,
    },
    Set { var: String, value: String },
    Fail { message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceScript {
    #[serde(default)]
    pub steps: Vec<ScriptStep>,
    #[serde(default)]
    pub response: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expect {
    Committed,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessExpect {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    Begin {
        txn: String,
        #[serde(default)]
        originator: Option<String>,
    },
    Put { txn: String, store: String, key: String, value: String },
    Get {
        txn: String,
        store: String,
        key: String,
        #[serde(default)]
        into: Option<String>,
    },
    Delete { txn: String, store: String, key: String },
    Send { txn: String, queue: String, message: String },
    Receive {
        txn: String,
        queue: String,
        #[serde(default)]
        into: Option<String>,
    },
    Invoke {
        service: String,
        #[serde(default)]
        request: Fields,
        #[serde(default)]
        into: Option<String>,
    },
    InvokeViaQueue {
        txn: String,
        queue: String,
        service: String,
        #[serde(default)]
        request: Fields,
        reply_to: String,
    },
    Propagate {
        txn: String,
        component: String,
        service: String,
        #[serde(default)]
        request: Fields,
        #[serde(default)]
        into: Option<String>,
    },
    Commit {
        txn: String,
        #[serde(default)]
        expect: Option<Expect>,
    },
    Rollback { txn: String },
    RunProcess {
        process: String,
        #[serde(default)]
        variables: BTreeMap<String, String>,
        #[serde(default)]
        expect: Option<ProcessExpect>,
    },
    Crash { target: String },
    Recover {},
    Assert(Check),
    /// Merges the groups into one sequence chosen by the seeded scheduler;
    /// each group keeps its own order.
    Interleave { groups: Vec<Vec<ActionSpec>> },
    DelayPrepare { rm: String, units: u64 },
}

impl Action {
    pub fn op(&self) -> &'static str {
        match self {
            Action::Begin { .. } => "begin",
            Action::Put { .. } => "put",
            Action::Get { .. } => "get",
            Action::Delete { .. } => "delete",
            Action::Send { .. } => "send",
            Action::Receive { .. } => "receive",
            Action::Invoke { .. } => "invoke",
            Action::InvokeViaQueue { .. } => "invoke_via_queue",
            Action::Propagate { .. } => "propagate",
            Action::Commit { .. } => "commit",
            Action::Rollback { .. } => "rollback",
            Action::RunProcess { .. } => "run_process",
            Action::Crash { .. } => "crash",
            Action::Recover {} => "recover",
            Action::Assert(_) => "assert",
            Action::Interleave { .. } => "interleave",
            Action::DelayPrepare { .. } => "delay_prepare",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ActionSpec {
    #[serde(flatten)]
    pub action: Action,
    /// The action is expected to fail; success counts as a failed check.
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub expect_error: bool,
}

// `flatten` would disable unknown-field checks on the action, so the flag is
// taken off the record by hand.
impl<'de> Deserialize<'de> for ActionSpec {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let mut record = serde_json::Map::deserialize(deserializer)?;
        let expect_error = match record.remove("expect_error") {
            None => false,
            Some(serde_json::Value::Bool(b)) => b,
            Some(other) => return Err(D::Error::custom(format!("expect_error must be a boolean, not {other}"))),
        };
        let action = Action::deserialize(serde_json::Value::Object(record)).map_err(D::Error::custom)?;
        Ok(ActionSpec { action, expect_error })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDoc {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub endpoints: Vec<PathBuf>,
    #[serde(default)]
    pub endpoint_timeout: Option<u64>,
    #[serde(default)]
    pub broker_tables: Vec<PathBuf>,
    #[serde(default)]
    pub processes: Vec<PathBuf>,
    #[serde(default)]
    pub stores: Vec<StoreDecl>,
    #[serde(default)]
    pub queues: Vec<QueueDecl>,
    /// Scripted implementations keyed by `Component.service`.
    #[serde(default)]
    pub services: BTreeMap<String, ServiceScript>,
    #[serde(default)]
    pub atomic: Vec<AtomicCheck>,
    #[serde(default)]
    pub actions: Vec<ActionSpec>,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read `{path}`: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("`{path}`: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

/// A scenario with every referenced file loaded.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub doc: ScenarioDoc,
    pub model: ComponentModel,
    pub endpoints: Vec<EndpointDef>,
    pub endpoint_timeout: u64,
    pub tables: Vec<BrokerTable>,
    pub processes: Vec<ProcessDefinition>,
}

fn read(path: &Path) -> Result<String, ScenarioError> {
    fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ScenarioError> {
    serde_json::from_str(&read(path)?).map_err(|e| ScenarioError::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

impl Scenario {
    /// Loads a scenario file; referenced paths are relative to its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
        let path = path.as_ref();
        let doc: ScenarioDoc = parse(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let model = match &doc.manifest {
            Some(m) => {
                let p = base.join(m);
                load_manifest(&read(&p)?).map_err(|e| ScenarioError::Parse {
                    path: p,
                    reason: e.to_string(),
                })?
            }
            None => ComponentModel::default(),
        };
        let endpoints = doc
            .endpoints
            .iter()
            .map(|p| parse(&base.join(p)))
            .collect::<Result<_, _>>()?;
        let tables = doc
            .broker_tables
            .iter()
            .map(|p| parse(&base.join(p)))
            .collect::<Result<_, _>>()?;
        let processes = doc
            .processes
            .iter()
            .map(|p| parse(&base.join(p)))
            .collect::<Result<_, _>>()?;
        Scenario::assemble(doc, model, endpoints, tables, processes)
    }

    /// Builds a scenario from parts already in memory.
    pub fn assemble(
        doc: ScenarioDoc,
        model: ComponentModel,
        endpoints: Vec<EndpointDef>,
        tables: Vec<BrokerTable>,
        processes: Vec<ProcessDefinition>,
    ) -> Result<Scenario, ScenarioError> {
        let scenario = Scenario {
            endpoint_timeout: doc.endpoint_timeout.unwrap_or(DEFAULT_TIMEOUT),
            doc,
            model,
            endpoints,
            tables,
            processes,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    /// Every resource manager id, stores first, in declaration order.
    pub fn resource_ids(&self) -> Vec<String> {
        self.doc
            .stores
            .iter()
            .map(|s| s.name.clone())
            .chain(self.doc.queues.iter().map(|q| q.name.clone()))
            .collect()
    }

    /// Queues that carry broker requests.
    pub fn broker_queues(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        visit(&self.doc.actions, &mut |a| {
            if let Action::InvokeViaQueue { queue, .. } = a {
                out.insert(queue.clone());
            }
        });
        out
    }

    fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |m: String| Err(ScenarioError::Invalid(m));
        let stores: BTreeSet<&str> = self.doc.stores.iter().map(|s| s.name.as_str()).collect();
        let queues: BTreeSet<&str> = self.doc.queues.iter().map(|q| q.name.as_str()).collect();
        if stores.len() != self.doc.stores.len() || queues.len() != self.doc.queues.len() {
            return invalid("duplicate store or queue name".into());
        }
        if let Some(name) = stores.intersection(&queues).next() {
            return invalid(format!("`{name}` is both a store and a queue"));
        }
        if stores.contains("coordinator") || queues.contains("coordinator") {
            return invalid("`coordinator` is reserved".into());
        }
        for key in self.doc.services.keys() {
            let Some((component, service)) = key.split_once('.') else {
                return invalid(format!("service key `{key}` must be `Component.service`"));
            };
            if let Err(e) = self.model.locate(component, service) {
                return invalid(format!("service `{key}`: {e}"));
            }
            for step in &self.doc.services[key].steps {
                let (store, queue) = match step {
                    ScriptStep::Put { store, .. } | ScriptStep::Get { store, .. } | ScriptStep::Delete { store, .. } => {
                        (Some(store), None)
                    }
                    ScriptStep::Send { queue, .. } | ScriptStep::Receive { queue, .. } => (None, Some(queue)),
                    _ => (None, None),
                };
                if store.is_some_and(|s| !stores.contains(s.as_str())) || queue.is_some_and(|q| !queues.contains(q.as_str())) {
                    return invalid(format!("service `{key}` touches an undeclared resource"));
                }
            }
        }
        let mut problem = None;
        visit(&self.doc.actions, &mut |a| {
            if problem.is_some() {
                return;
            }
            let check_store = |s: &String| (!stores.contains(s.as_str())).then(|| format!("unknown store `{s}`"));
            let check_queue = |q: &String| (!queues.contains(q.as_str())).then(|| format!("unknown queue `{q}`"));
            problem = match a {
                Action::Put { store, .. } | Action::Get { store, .. } | Action::Delete { store, .. } => check_store(store),
                Action::Send { queue, .. } | Action::Receive { queue, .. } => check_queue(queue),
                Action::InvokeViaQueue { queue, reply_to, .. } => check_queue(queue).or_else(|| check_queue(reply_to)),
                Action::Assert(check) => match check {
                    Check::Store { store, .. } => check_store(store),
                    Check::Queue { queue, .. } => check_queue(queue),
                    _ => None,
                },
                Action::Crash { target } | Action::DelayPrepare { rm: target, .. }
                    if target != "coordinator" && !stores.contains(target.as_str()) && !queues.contains(target.as_str()) =>
                {
                    Some(format!("unknown crash or delay target `{target}`"))
                }
                Action::RunProcess { process, .. } if !self.processes.iter().any(|p| &p.name == process) => {
                    Some(format!("unknown process `{process}`"))
                }
                _ => None,
            };
        });
        if let Some(p) = problem {
            return invalid(p);
        }
        Ok(())
    }
}

/// Visits every action, descending into interleave groups.
pub fn visit<'a>(actions: &'a [ActionSpec], f: &mut impl FnMut(&'a Action)) {
    for spec in actions {
        f(&spec.action);
        if let Action::Interleave { groups } = &spec.action {
            for g in groups {
                visit(g, f);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn actions_parse_from_records() {
        let actions: Vec<ActionSpec> = serde_json::from_str(
            r#"[
              {"op":"begin","txn":"t1","originator":"Customer"},
              {"op":"put","txn":"t1","store":"a","key":"k","value":"v"},
              {"op":"commit","txn":"t1","expect":"committed"},
              {"op":"assert","store":"a","key":"k","equals":"v"},
              {"op":"assert","store":"a","key":"gone","equals":null},
              {"op":"assert","queue":"q","contents":["m"]},
              {"op":"assert","txn":"t1","status":"committed"},
              {"op":"recover"},
              {"op":"crash","target":"coordinator"},
              {"op":"propagate","txn":"t1","component":"C","service":"s","request":{"id":"1"},"expect_error":true},
              {"op":"interleave","groups":[[{"op":"begin","txn":"x"}],[{"op":"begin","txn":"y"}]]}
            ]"#,
        )
        .unwrap();
        assert_eq!(actions.len(), 11);
        assert_eq!(
            actions[4].action,
            Action::Assert(Check::Store {
                store: "a".into(),
                key: "gone".into(),
                equals: None
            })
        );
        assert!(actions[9].expect_error);
        assert_eq!(actions[10].action.op(), "interleave");
    }

    #[test]
    fn unknown_ops_and_fields_are_rejected() {
        assert!(serde_json::from_str::<ActionSpec>(r#"{"op":"explode"}"#).is_err());
        assert!(serde_json::from_str::<ScenarioDoc>(r#"{"name":"x","bogus":1}"#).is_err());
    }

    #[test]
    fn validation_catches_unknown_names() {
        let doc: ScenarioDoc = serde_json::from_str(
            r#"{"name":"x","stores":[{"name":"a"}],
                "actions":[{"op":"begin","txn":"t"},{"op":"put","txn":"t","store":"b","key":"k","value":"v"}]}"#,
        )
        .unwrap();
        let err = Scenario::assemble(doc, ComponentModel::default(), vec![], vec![], vec![]).unwrap_err();
        assert!(err.to_string().contains("unknown store `b`"));
    }
}
