//! Scripted stand-ins for legacy applications, and the adapters that carry
//! records to them.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::record::MessageSpec;
use crate::value::{Fields, Value};

/// Simulated time an endpoint takes to answer unless its script says
/// otherwise.
pub const DEFAULT_LATENCY: u64 = 1;

/// Budget an adapter waits for a reply.
pub const DEFAULT_TIMEOUT: u64 = 100;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ReplyValue {
    /// Copies a field of the decoded request.
    Echo { echo: String },
    Literal(Value),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum Behavior {
    Reply {
        #[serde(default)]
        fields: BTreeMap<String, ReplyValue>,
        #[serde(default)]
        delay: Option<u64>,
    },
    /// Stays silent for `units`, then drops the connection.
    Delay { units: u64 },
    Error { message: String },
    /// Answers with a raw record that need not match the response layout.
    Garbage { record: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    /// Field equality predicate on the decoded request; empty matches all.
    #[serde(default, rename = "match")]
    pub when: BTreeMap<String, Value>,
    #[serde(flatten)]
    pub behavior: Behavior,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointDef {
    pub id: String,
    pub request_spec: MessageSpec,
    pub response_spec: MessageSpec,
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EndpointReply {
    Record { record: String, latency: u64 },
    Silent { units: u64 },
    Failed { message: String, latency: u64 },
}

/// A legacy application simulator. Replies are a pure function of the
/// request record; the endpoint only counts how often it was called.
#[derive(Debug)]
pub struct LegacyEndpoint {
    def: EndpointDef,
    calls: AtomicU64,
}

impl LegacyEndpoint {
    pub fn new(def: EndpointDef) -> Self {
        LegacyEndpoint {
            def,
            calls: AtomicU64::new(0),
        }
    }

    pub fn id(&self) -> &str {
        &self.def.id
    }

    pub fn def(&self) -> &EndpointDef {
        &self.def
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn handle(&self, record: &str) -> EndpointReply {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let request = match self.def.request_spec.decode(record) {
            Ok(f) => f,
            Err(e) => {
                return EndpointReply::Failed {
                    message: format!("malformed request: {e}"),
                    latency: DEFAULT_LATENCY,
                }
            }
        };
        let Some(rule) = self.def.rules.iter().find(|r| matches(&r.when, &request)) else {
            return EndpointReply::Failed {
                message: "no rule matches the request".into(),
                latency: DEFAULT_LATENCY,
            };
        };
        match &rule.behavior {
            Behavior::Reply { fields, delay } => {
                let latency = delay.unwrap_or(DEFAULT_LATENCY);
                let mut reply = Fields::new();
                for (name, v) in fields {
                    let value = match v {
                        ReplyValue::Literal(v) => v.clone(),
                        ReplyValue::Echo { echo } => match request.get(echo) {
                            Some(v) => v.clone(),
                            None => {
                                return EndpointReply::Failed {
                                    message: format!("script echoes unknown field `{echo}`"),
                                    latency,
                                }
                            }
                        },
                    };
                    reply.insert(name.clone(), value);
                }
                match self.def.response_spec.encode(&reply) {
                    Ok(record) => EndpointReply::Record { record, latency },
                    Err(e) => EndpointReply::Failed {
                        message: format!("script reply does not fit: {e}"),
                        latency,
                    },
                }
            }
            Behavior::Delay { units } => EndpointReply::Silent { units: *units },
            Behavior::Error { message } => EndpointReply::Failed {
                message: message.clone(),
                latency: DEFAULT_LATENCY,
            },
            Behavior::Garbage { record } => EndpointReply::Record {
                record: record.clone(),
                latency: DEFAULT_LATENCY,
            },
        }
    }
}

fn matches(when: &BTreeMap<String, Value>, request: &Fields) -> bool {
    when.iter().all(|(name, expected)| {
        request
            .get(name)
            .is_some_and(|actual| expected.coerce(actual.kind()).is_ok_and(|e| &e == actual))
    })
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AdapterError {
    #[error("no reply within {after} time units")]
    Timeout { after: u64 },
    #[error("endpoint error: {0}")]
    Endpoint(String),
}

/// Pure transport to one endpoint with a timeout budget.
#[derive(Debug, Clone)]
pub struct Adapter {
    endpoint: Arc<LegacyEndpoint>,
    timeout: u64,
}

impl Adapter {
    pub fn new(endpoint: Arc<LegacyEndpoint>, timeout: u64) -> Self {
        Adapter { endpoint, timeout }
    }

    pub fn endpoint(&self) -> &Arc<LegacyEndpoint> {
        &self.endpoint
    }

    pub fn timeout(&self) -> u64 {
        self.timeout
    }

    /// Sends one record; returns the outcome and the simulated time spent.
    pub fn send(&self, record: &str) -> (Result<String, AdapterError>, u64) {
        match self.endpoint.handle(record) {
            EndpointReply::Record { latency, .. } | EndpointReply::Failed { latency, .. } if latency > self.timeout => {
                (Err(AdapterError::Timeout { after: self.timeout }), self.timeout)
            }
            EndpointReply::Silent { units } if units >= self.timeout => {
                (Err(AdapterError::Timeout { after: self.timeout }), self.timeout)
            }
            EndpointReply::Silent { units } => (Err(AdapterError::Endpoint(format!("connection dropped after {units} time units"))), units),
            EndpointReply::Record { record, latency } => (Ok(record), latency),
            EndpointReply::Failed { message, latency } => (Err(AdapterError::Endpoint(message)), latency),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn endpoint() -> LegacyEndpoint {
        let def: EndpointDef = serde_json::from_str(
            r#"{"id":"POLADM",
                "request_spec":{"length":6,"fields":[{"name":"cust","offset":0,"length":6,"kind":"text"}]},
                "response_spec":{"length":16,"fields":[
                    {"name":"cust","offset":0,"length":6,"kind":"text"},
                    {"name":"policies","offset":6,"length":4,"kind":"integer"},
                    {"name":"premium","offset":10,"length":6,"kind":"decimal","scale":2}]},
                "rules":[
                    {"match":{"cust":"SLOW"},"action":"delay","units":500},
                    {"match":{"cust":"BAD"},"action":"garbage","record":"??"},
                    {"match":{"cust":"ERR"},"action":"error","message":"region closed"},
                    {"action":"reply","fields":{"cust":{"echo":"cust"},"policies":3,"premium":"12.50"},"delay":4}]}"#,
        )
        .unwrap();
        LegacyEndpoint::new(def)
    }

    #[test]
    fn scripted_reply_echoes_and_encodes() {
        let ep = endpoint();
        assert_eq!(
            ep.handle("C001  "),
            EndpointReply::Record {
                record: "C001  0003001250".into(),
                latency: 4
            }
        );
        assert_eq!(ep.calls(), 1);
    }

    #[test]
    fn adapter_applies_timeout_budget() {
        let adapter = Adapter::new(Arc::new(endpoint()), 100);
        assert_eq!(adapter.send("SLOW  "), (Err(AdapterError::Timeout { after: 100 }), 100));
        assert_eq!(adapter.send("BAD   "), (Ok("??".into()), 1));
        assert_eq!(adapter.send("ERR   ").0, Err(AdapterError::Endpoint("region closed".into())));
        let tight = Adapter::new(adapter.endpoint().clone(), 3);
        assert_eq!(tight.send("C001  "), (Err(AdapterError::Timeout { after: 3 }), 3));
        assert!(matches!(adapter.send("C0"), (Err(AdapterError::Endpoint(_)), _)));
    }
}
