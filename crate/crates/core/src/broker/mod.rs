//! Table-driven message broker over simulated legacy applications.
//!
//! Callers name a projected service and pass service fields; the broker's
//! tables decide which legacy endpoints are called, how their fixed-width
//! records are laid out, and how replies are merged. Broker calls never join
//! the caller's transaction. The only transactional path is
//! [`Broker::invoke_via_queue`], whose request becomes visible to the broker
//! when the caller commits.

mod endpoint;
mod record;
mod table;

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::component::{conform, ServiceSignature};
use crate::rm::{RmError, TxnQueue};
use crate::sim::{EventKind, Trace};
use crate::txn::{Coordinator, Outcome, TransactionContext, TxnError};
use crate::value::{Fields, Value};

pub use endpoint::{
    Adapter, AdapterError, Behavior, EndpointDef, EndpointReply, LegacyEndpoint, ReplyValue, ScriptRule,
    DEFAULT_LATENCY, DEFAULT_TIMEOUT,
};
pub use record::{Align, DecodeError, EncodeError, FieldSpec, MessageSpec, Pad, SpecError};
pub use table::{BrokerTable, LegacyCall, Mapping, Source, TableError};

/// How calls within one dependency stage are dispatched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Dispatch {
    /// Every call of a stage runs on its own thread.
    #[default]
    Parallel,
    /// One call at a time, respecting dependencies, smallest call id first.
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CallFailure {
    #[error("cannot build request: {0}")]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error("cannot read reply: {0}")]
    Decode(#[from] DecodeError),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BrokerError {
    #[error("unknown service `{0}`")]
    UnknownService(String),
    #[error("endpoint `{0}` already has an adapter")]
    DuplicateEndpoint(String),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("request for `{service}`: {reason}")]
    Request { service: String, reason: String },
    #[error("`{service}` call `{call}` failed: {failure}")]
    Call {
        service: String,
        call: String,
        failure: CallFailure,
    },
    #[error("response for `{service}`: {reason}")]
    Response { service: String, reason: String },
}

/// Request placed on a broker request queue.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueuedRequest {
    pub service: String,
    pub request: Fields,
    pub reply_to: String,
}

/// The broker's answer to a [`QueuedRequest`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueuedResponse {
    pub service: String,
    pub request: Fields,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<Fields>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Txn(#[from] TxnError),
    #[error(transparent)]
    Rm(#[from] RmError),
    #[error("reply queue `{0}` is unknown")]
    UnknownReplyQueue(String),
    #[error("transaction consuming a request aborted")]
    Aborted,
}

struct CallResult {
    index: usize,
    latency: u64,
    outcome: Result<Fields, CallFailure>,
}

#[derive(Debug, Default)]
pub struct Broker {
    adapters: RwLock<BTreeMap<String, Adapter>>,
    tables: RwLock<BTreeMap<String, Arc<BrokerTable>>>,
    trace: Trace,
    dispatch: Dispatch,
}

impl Broker {
    pub fn new(trace: Trace) -> Self {
        Broker {
            trace,
            ..Broker::default()
        }
    }

    pub fn with_dispatch(mut self, dispatch: Dispatch) -> Self {
        self.dispatch = dispatch;
        self
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn add_endpoint(&self, endpoint: Arc<LegacyEndpoint>, timeout: u64) -> Result<(), BrokerError> {
        let mut adapters = self.adapters.write().expect("adapters lock");
        if adapters.contains_key(endpoint.id()) {
            return Err(BrokerError::DuplicateEndpoint(endpoint.id().to_string()));
        }
        adapters.insert(endpoint.id().to_string(), Adapter::new(endpoint, timeout));
        Ok(())
    }

    pub fn endpoint(&self, id: &str) -> Option<Arc<LegacyEndpoint>> {
        self.adapters.read().expect("adapters lock").get(id).map(|a| a.endpoint().clone())
    }

    /// Adds or replaces the table for its service.
    pub fn register_table(&self, table: BrokerTable) -> Result<(), BrokerError> {
        {
            let adapters = self.adapters.read().expect("adapters lock");
            if let Some(call) = table.calls().iter().find(|c| !adapters.contains_key(&c.endpoint)) {
                return Err(TableError::UnknownEndpoint {
                    call: call.id.clone(),
                    endpoint: call.endpoint.clone(),
                }
                .into());
            }
        }
        self.tables
            .write()
            .expect("tables lock")
            .insert(table.service().to_string(), Arc::new(table));
        Ok(())
    }

    /// The services the broker projects, by name.
    pub fn project_interface(&self) -> Vec<ServiceSignature> {
        self.tables
            .read()
            .expect("tables lock")
            .values()
            .map(|t| t.signature())
            .collect()
    }

    pub fn invoke(&self, service: &str, request: &Fields) -> Result<Fields, BrokerError> {
        self.invoke_with(self.dispatch, service, request)
    }

    pub fn invoke_with(&self, dispatch: Dispatch, service: &str, request: &Fields) -> Result<Fields, BrokerError> {
        let result = self.run(dispatch, service, request);
        self.trace.record(EventKind::BrokerInvoke {
            service: service.to_string(),
            ok: result.is_ok(),
        });
        result
    }

    fn run(&self, dispatch: Dispatch, service: &str, request: &Fields) -> Result<Fields, BrokerError> {
        let table = self
            .tables
            .read()
            .expect("tables lock")
            .get(service)
            .cloned()
            .ok_or_else(|| BrokerError::UnknownService(service.to_string()))?;
        let request = conform(request, table.request()).map_err(|reason| BrokerError::Request {
            service: service.to_string(),
            reason,
        })?;
        let adapters: Vec<Adapter> = {
            let all = self.adapters.read().expect("adapters lock");
            table
                .calls()
                .iter()
                .map(|c| all.get(&c.endpoint).cloned())
                .collect::<Option<_>>()
                .ok_or_else(|| BrokerError::Request {
                    service: service.to_string(),
                    reason: "an endpoint of this service was removed".into(),
                })?
        };
        let mut replies: Vec<Option<Fields>> = vec![None; table.calls().len()];
        let waves: Vec<Vec<usize>> = match dispatch {
            Dispatch::Parallel => table.stages().to_vec(),
            Dispatch::Sequential => sequential_order(&table).into_iter().map(|i| vec![i]).collect(),
        };
        for wave in waves {
            let results = self.dispatch_wave(&table, &adapters, &wave, &request, &replies);
            let mut failure = None;
            let mut latency = 0;
            for r in results {
                let call = &table.calls()[r.index];
                self.trace.record(EventKind::LegacyCall {
                    service: service.to_string(),
                    call: call.id.clone(),
                    endpoint: call.endpoint.clone(),
                    latency: r.latency,
                    ok: r.outcome.is_ok(),
                });
                latency = latency.max(r.latency);
                match r.outcome {
                    Ok(fields) => replies[r.index] = Some(fields),
                    Err(e) if failure.is_none() => failure = Some((call.id.clone(), e)),
                    Err(_) => {}
                }
            }
            self.trace.advance(latency);
            if let Some((call, failure)) = failure {
                return Err(BrokerError::Call {
                    service: service.to_string(),
                    call,
                    failure,
                });
            }
        }
        let response = aggregate(&table, &replies);
        conform(&response, table.response()).map_err(|reason| BrokerError::Response {
            service: service.to_string(),
            reason,
        })
    }

    /// Runs one wave of calls; results come back in wave order whatever
    /// order they complete in.
    fn dispatch_wave(
        &self,
        table: &BrokerTable,
        adapters: &[Adapter],
        wave: &[usize],
        request: &Fields,
        replies: &[Option<Fields>],
    ) -> Vec<CallResult> {
        let one = |index: usize| {
            let (outcome, latency) = perform(table, index, &adapters[index], request, replies);
            CallResult {
                index,
                latency,
                outcome,
            }
        };
        if wave.len() < 2 {
            return wave.iter().map(|&i| one(i)).collect();
        }
        std::thread::scope(|scope| {
            let handles: Vec<_> = wave.iter().map(|&i| scope.spawn(move || one(i))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("broker call thread panicked"))
                .collect()
        })
    }

    /// Stages a request on `requests` inside `ctx`. The broker sees it only
    /// after the transaction commits; the answer goes to `reply_to`.
    pub fn invoke_via_queue(
        &self,
        ctx: &TransactionContext,
        requests: &TxnQueue,
        service: &str,
        request: &Fields,
        reply_to: &TxnQueue,
    ) -> Result<(), RmError> {
        let message = QueuedRequest {
            service: service.to_string(),
            request: request.clone(),
            reply_to: crate::rm::ResourceManager::id(reply_to).to_string(),
        };
        requests.send(ctx, serde_json::to_vec(&message).expect("request serializes"))
    }

    /// Consumes every committed request on `requests`, one transaction per
    /// message: receive, invoke, send exactly one response to the named reply
    /// queue, commit. Returns how many requests were answered.
    pub fn serve(
        &self,
        coordinator: &Coordinator,
        requests: &TxnQueue,
        reply_queue: impl Fn(&str) -> Option<Arc<TxnQueue>>,
    ) -> Result<usize, ServeError> {
        let mut served = 0;
        while !requests.is_empty() {
            let ctx = coordinator.begin("broker")?;
            let Some(message) = requests.receive(&ctx)? else {
                coordinator.rollback(&ctx)?;
                break;
            };
            let response = match serde_json::from_slice::<QueuedRequest>(&message) {
                Ok(req) => {
                    let target = reply_queue(&req.reply_to);
                    let (response, error) = match self.invoke(&req.service, &req.request) {
                        Ok(fields) => (Some(fields), None),
                        Err(e) => (None, Some(e.to_string())),
                    };
                    let reply = QueuedResponse {
                        service: req.service,
                        request: req.request,
                        response,
                        error,
                    };
                    match target {
                        Some(q) => Some((q, reply)),
                        None => {
                            coordinator.rollback(&ctx)?;
                            return Err(ServeError::UnknownReplyQueue(req.reply_to));
                        }
                    }
                }
                // Unreadable requests are consumed without an answer.
                Err(_) => None,
            };
            if let Some((q, reply)) = response {
                q.send(&ctx, serde_json::to_vec(&reply).expect("response serializes"))?;
            }
            if coordinator.commit(&ctx)? != Outcome::Committed {
                return Err(ServeError::Aborted);
            }
            served += 1;
        }
        Ok(served)
    }
}

fn perform(
    table: &BrokerTable,
    index: usize,
    adapter: &Adapter,
    request: &Fields,
    replies: &[Option<Fields>],
) -> (Result<Fields, CallFailure>, u64) {
    let call = &table.calls()[index];
    let mut legacy = Fields::new();
    for (field, mapping) in &call.request_map {
        let value = match mapping {
            Mapping::Request(name) => request[name].clone(),
            Mapping::Literal(text) => Value::Text(text.clone()),
            Mapping::Call { call: source, field: name } => {
                let j = table
                    .calls()
                    .iter()
                    .position(|c| &c.id == source)
                    .expect("validated reference");
                replies[j].as_ref().expect("dependency answered in an earlier wave")[name].clone()
            }
        };
        legacy.insert(field.clone(), value);
    }
    let record = match call.request_spec.encode(&legacy) {
        Ok(r) => r,
        Err(e) => return (Err(e.into()), 0),
    };
    let (reply, latency) = adapter.send(&record);
    let outcome = reply
        .map_err(CallFailure::from)
        .and_then(|r| call.response_spec.decode(&r).map_err(CallFailure::from));
    (outcome, latency)
}

/// First non-empty source in precedence order; if every source is empty,
/// the first one.
fn aggregate(table: &BrokerTable, replies: &[Option<Fields>]) -> Fields {
    let index: BTreeMap<&str, usize> = table
        .calls()
        .iter()
        .enumerate()
        .map(|(i, c)| (c.id.as_str(), i))
        .collect();
    let mut response = Fields::new();
    for (field, sources) in table.aggregate() {
        let values: Vec<&Value> = sources
            .iter()
            .filter_map(|s| replies[index[s.call.as_str()]].as_ref()?.get(&s.field))
            .collect();
        let chosen = values
            .iter()
            .find(|v| !matches!(v, Value::Text(t) if t.is_empty()))
            .or(values.first());
        if let Some(v) = chosen {
            response.insert(field.clone(), (*v).clone());
        }
    }
    response
}

/// A dependency-respecting order that always runs the smallest ready call id
/// next.
fn sequential_order(table: &BrokerTable) -> Vec<usize> {
    let calls = table.calls();
    let mut done = vec![false; calls.len()];
    let mut order = Vec::with_capacity(calls.len());
    while order.len() < calls.len() {
        let next = (0..calls.len())
            .filter(|&i| !done[i])
            .filter(|&i| {
                calls[i]
                    .depends_on
                    .iter()
                    .all(|d| calls.iter().position(|c| &c.id == d).is_some_and(|j| done[j]))
            })
            .min_by(|&a, &b| calls[a].id.cmp(&calls[b].id))
            .expect("validated tables are acyclic");
        done[next] = true;
        order.push(next);
    }
    order
}

#[cfg(test)]
mod tests {
    use super::table::tests::CUSTOMER_360;
    use super::*;
    use crate::log::DurableLog;
    use crate::rm::ResourceManager;

    const POLADM: &str = r#"{"id":"POLADM",
        "request_spec":{"length":10,"fields":[
            {"name":"op","offset":0,"length":4,"kind":"text"},
            {"name":"cust","offset":4,"length":6,"kind":"text"}]},
        "response_spec":{"length":20,"fields":[
            {"name":"name","offset":0,"length":16,"kind":"text"},
            {"name":"count","offset":16,"length":4,"kind":"integer"}]},
        "rules":[
            {"match":{"cust":"SLOW"},"action":"delay","units":1000},
            {"match":{"cust":"C1"},"action":"reply","fields":{"name":"","count":2},"delay":3},
            {"action":"reply","fields":{"name":"SMITH","count":1},"delay":5}]}"#;

    const BILLSYS: &str = r#"{"id":"BILLSYS",
        "request_spec":{"length":6,"fields":[{"name":"acct","offset":0,"length":6,"kind":"text"}]},
        "response_spec":{"length":26,"fields":[
            {"name":"holder","offset":0,"length":16,"kind":"text"},
            {"name":"balance","offset":16,"length":10,"kind":"decimal","scale":2}]},
        "rules":[{"action":"reply","fields":{"holder":"J SMITH","balance":"-12.34"},"delay":2}]}"#;

    fn broker(trace: Trace) -> Broker {
        let broker = Broker::new(trace);
        for doc in [POLADM, BILLSYS] {
            let def: EndpointDef = serde_json::from_str(doc).unwrap();
            broker.add_endpoint(Arc::new(LegacyEndpoint::new(def)), DEFAULT_TIMEOUT).unwrap();
        }
        broker.register_table(CUSTOMER_360.parse().unwrap()).unwrap();
        broker
    }

    fn req(id: &str) -> Fields {
        Fields::from([("customerId".to_string(), Value::text(id))])
    }

    #[test]
    fn fan_out_merges_disjoint_fields() {
        let trace = Trace::new();
        let b = broker(trace.clone());
        let resp = b.invoke("getCustomer360", &req("C9")).unwrap();
        assert_eq!(resp["name"], Value::text("SMITH"));
        assert_eq!(resp["policies"], Value::Integer(1));
        assert_eq!(resp["balance"].to_string(), "-12.34");
        assert_eq!(resp, b.invoke_with(Dispatch::Sequential, "getCustomer360", &req("C9")).unwrap());
        assert_eq!(b.project_interface()[0].name, "getCustomer360");
    }

    #[test]
    fn precedence_skips_empty_sources() {
        let b = broker(Trace::new());
        let resp = b.invoke("getCustomer360", &req("C1")).unwrap();
        assert_eq!(resp["name"], Value::text("J SMITH"));
    }

    #[test]
    fn parallel_stage_costs_its_slowest_call() {
        let trace = Trace::new();
        let b = broker(trace.clone());
        let start = trace.now();
        b.invoke("getCustomer360", &req("C9")).unwrap();
        // Two call events, one invoke event, and the 5-unit stage.
        assert_eq!(trace.now() - start, 3 + 5);
        let start = trace.now();
        b.invoke_with(Dispatch::Sequential, "getCustomer360", &req("C9")).unwrap();
        assert_eq!(trace.now() - start, 3 + 5 + 2);
    }

    #[test]
    fn timeout_fails_the_whole_invocation() {
        let b = broker(Trace::new());
        match b.invoke("getCustomer360", &req("SLOW")) {
            Err(BrokerError::Call { call, failure, .. }) => {
                assert_eq!(call, "pol");
                assert_eq!(failure, CallFailure::Adapter(AdapterError::Timeout { after: DEFAULT_TIMEOUT }));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_service_and_endpoint() {
        let b = broker(Trace::new());
        assert_eq!(
            b.invoke("nope", &Fields::new()),
            Err(BrokerError::UnknownService("nope".into()))
        );
        let bare = Broker::new(Trace::new());
        assert!(matches!(
            bare.register_table(CUSTOMER_360.parse().unwrap()),
            Err(BrokerError::Table(TableError::UnknownEndpoint { .. }))
        ));
        assert!(bare.project_interface().is_empty());
    }

    struct Queues {
        coord: Coordinator,
        requests: Arc<TxnQueue>,
        replies: Arc<TxnQueue>,
    }

    fn queues(trace: &Trace) -> Queues {
        let coord = Coordinator::new(DurableLog::in_memory(), trace.clone()).unwrap();
        let requests = Arc::new(TxnQueue::in_memory("requests", trace.clone()));
        let replies = Arc::new(TxnQueue::in_memory("replies", trace.clone()));
        coord.register(requests.clone()).unwrap();
        coord.register(replies.clone()).unwrap();
        Queues {
            coord,
            requests,
            replies,
        }
    }

    #[test]
    fn queued_request_is_invisible_after_rollback() {
        let trace = Trace::new();
        let b = broker(trace.clone());
        let q = queues(&trace);
        let ctx = q.coord.begin("Customer").unwrap();
        b.invoke_via_queue(&ctx, &q.requests, "getCustomer360", &req("C9"), &q.replies)
            .unwrap();
        q.coord.rollback(&ctx).unwrap();
        let replies = q.replies.clone();
        assert_eq!(b.serve(&q.coord, &q.requests, |_| Some(replies.clone())).unwrap(), 0);
        assert_eq!(b.endpoint("POLADM").unwrap().calls(), 0);
        assert!(q.replies.is_empty());
    }

    #[test]
    fn queued_requests_answered_in_order() {
        let trace = Trace::new();
        let b = broker(trace.clone());
        let q = queues(&trace);
        let ctx = q.coord.begin("Customer").unwrap();
        for id in ["C9", "C1", "SLOW"] {
            b.invoke_via_queue(&ctx, &q.requests, "getCustomer360", &req(id), &q.replies)
                .unwrap();
        }
        q.coord.commit(&ctx).unwrap();
        let replies = q.replies.clone();
        let resolve = |name: &str| (name == replies.id()).then(|| replies.clone());
        assert_eq!(b.serve(&q.coord, &q.requests, resolve).unwrap(), 3);
        assert!(q.requests.is_empty());
        let answers: Vec<QueuedResponse> = q
            .replies
            .messages()
            .iter()
            .map(|m| serde_json::from_slice(m).unwrap())
            .collect();
        assert_eq!(answers.len(), 3);
        for (answer, id) in answers.iter().zip(["C9", "C1", "SLOW"]) {
            assert_eq!(answer.request, req(id));
            let show = |f: &Fields| f.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>();
            let direct = b.invoke("getCustomer360", &req(id)).ok();
            assert_eq!(answer.response.as_ref().map(show), direct.as_ref().map(show));
        }
        assert!(answers[2].error.as_deref().unwrap().contains("pol"));
    }
}
