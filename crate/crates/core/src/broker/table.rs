//! Declarative plans mapping one projected service onto legacy calls.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::record::MessageSpec;
use crate::component::{FieldDecl, ServiceSignature};

/// Where a legacy request field gets its value.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Mapping {
    /// `req.<field>`: a field of the service request.
    Request(String),
    /// `lit:<text>`
    Literal(String),
    /// `call:<id>.<field>`: a response field of an earlier call.
    Call { call: String, field: String },
}

impl fmt::Display for Mapping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mapping::Request(field) => write!(f, "req.{field}"),
            Mapping::Literal(text) => write!(f, "lit:{text}"),
            Mapping::Call { call, field } => write!(f, "call:{call}.{field}"),
        }
    }
}

fn parse_call_ref(s: &str) -> Option<(String, String)> {
    let rest = s.strip_prefix("call:")?;
    let (call, field) = rest.split_once('.')?;
    (!call.is_empty() && !field.is_empty()).then(|| (call.to_string(), field.to_string()))
}

impl FromStr for Mapping {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(text) = s.strip_prefix("lit:") {
            return Ok(Mapping::Literal(text.to_string()));
        }
        if let Some(field) = s.strip_prefix("req.") {
            if !field.is_empty() {
                return Ok(Mapping::Request(field.to_string()));
            }
        }
        if let Some((call, field)) = parse_call_ref(s) {
            return Ok(Mapping::Call { call, field });
        }
        Err(format!("bad mapping `{s}`: expected req.<field>, lit:<text> or call:<id>.<field>"))
    }
}

impl Serialize for Mapping {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Mapping {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        String::deserialize(deserializer)?.parse().map_err(serde::de::Error::custom)
    }
}

/// An aggregation source `call:<id>.<field>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Source {
    pub call: String,
    pub field: String,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "call:{}.{}", self.call, self.field)
    }
}

impl FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_call_ref(s)
            .map(|(call, field)| Source { call, field })
            .ok_or_else(|| format!("bad source `{s}`: expected call:<id>.<field>"))
    }
}

impl Serialize for Source {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Source {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        String::deserialize(deserializer)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LegacyCall {
    pub id: String,
    pub endpoint: String,
    #[serde(default)]
    pub depends_on: Vec<String>,
    pub request_spec: MessageSpec,
    #[serde(default)]
    pub request_map: BTreeMap<String, Mapping>,
    pub response_spec: MessageSpec,
}

impl LegacyCall {
    /// Calls whose responses the request mapping reads.
    pub fn referenced_calls(&self) -> BTreeSet<&str> {
        self.request_map
            .values()
            .filter_map(|m| match m {
                Mapping::Call { call, .. } => Some(call.as_str()),
                _ => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TableError {
    #[error("malformed broker table: {0}")]
    Parse(String),
    #[error("call id `{0}` declared twice")]
    DuplicateCall(String),
    #[error("call `{call}` targets unknown endpoint `{endpoint}`")]
    UnknownEndpoint { call: String, endpoint: String },
    #[error("call `{call}` depends on unknown call `{dependency}`")]
    UnknownDependency { call: String, dependency: String },
    #[error("call dependencies form a cycle through {0:?}")]
    Cycle(Vec<String>),
    #[error("call `{call}` declares depends_on {declared:?} but its mapping reads {referenced:?}")]
    DependsMismatch {
        call: String,
        declared: Vec<String>,
        referenced: Vec<String>,
    },
    #[error("call `{call}`: request field `{field}` has no mapping")]
    Unmapped { call: String, field: String },
    #[error("call `{call}`: mapping `{mapping}`: {reason}")]
    BadMapping { call: String, mapping: String, reason: String },
    #[error("response field `{0}` has no source")]
    Uncovered(String),
    #[error("aggregate names `{0}`, which is not a response field")]
    UnknownResponseField(String),
    #[error("aggregate source `{source_ref}` for `{field}`: {reason}")]
    BadSource { field: String, source_ref: String, reason: String },
    #[error("field `{0}` declared twice in the service signature")]
    DuplicateField(String),
}

/// A validated broker table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTable", into = "RawTable")]
pub struct BrokerTable {
    service: String,
    request: Vec<FieldDecl>,
    response: Vec<FieldDecl>,
    calls: Vec<LegacyCall>,
    aggregate: BTreeMap<String, Vec<Source>>,
    stages: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTable {
    service: String,
    #[serde(default)]
    request: Vec<FieldDecl>,
    #[serde(default)]
    response: Vec<FieldDecl>,
    #[serde(default)]
    calls: Vec<LegacyCall>,
    #[serde(default)]
    aggregate: BTreeMap<String, Vec<Source>>,
}

impl TryFrom<RawTable> for BrokerTable {
    type Error = TableError;

    fn try_from(raw: RawTable) -> Result<Self, Self::Error> {
        BrokerTable::new(raw.service, raw.request, raw.response, raw.calls, raw.aggregate)
    }
}

impl From<BrokerTable> for RawTable {
    fn from(t: BrokerTable) -> Self {
        RawTable {
            service: t.service,
            request: t.request,
            response: t.response,
            calls: t.calls,
            aggregate: t.aggregate,
        }
    }
}

impl FromStr for BrokerTable {
    type Err = TableError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_str(s).map_err(|e| TableError::Parse(e.to_string()))
    }
}

impl BrokerTable {
    /// Validates everything that does not depend on which endpoints exist.
    pub fn new(
        service: String,
        request: Vec<FieldDecl>,
        response: Vec<FieldDecl>,
        calls: Vec<LegacyCall>,
        aggregate: BTreeMap<String, Vec<Source>>,
    ) -> Result<Self, TableError> {
        for decls in [&request, &response] {
            let mut seen = BTreeSet::new();
            if let Some(d) = decls.iter().find(|d| !seen.insert(d.name.as_str())) {
                return Err(TableError::DuplicateField(d.name.clone()));
            }
        }
        let mut index = BTreeMap::new();
        for (i, call) in calls.iter().enumerate() {
            if index.insert(call.id.as_str(), i).is_some() {
                return Err(TableError::DuplicateCall(call.id.clone()));
            }
        }
        for call in &calls {
            check_call(call, &request, &calls, &index)?;
        }
        let stages = stage(&calls, &index)?;
        for (field, sources) in &aggregate {
            if !response.iter().any(|d| &d.name == field) {
                return Err(TableError::UnknownResponseField(field.clone()));
            }
            let mut seen = BTreeSet::new();
            for source in sources {
                let bad = |reason: &str| TableError::BadSource {
                    field: field.clone(),
                    source_ref: source.to_string(),
                    reason: reason.to_string(),
                };
                let call = index
                    .get(source.call.as_str())
                    .map(|&i| &calls[i])
                    .ok_or_else(|| bad("unknown call"))?;
                if call.response_spec.field(&source.field).is_none() {
                    return Err(bad("not a response field of that call"));
                }
                if !seen.insert(source) {
                    return Err(bad("listed twice"));
                }
            }
        }
        if let Some(d) = response
            .iter()
            .find(|d| aggregate.get(&d.name).is_none_or(|s| s.is_empty()))
        {
            return Err(TableError::Uncovered(d.name.clone()));
        }
        Ok(BrokerTable {
            service,
            request,
            response,
            calls,
            aggregate,
            stages,
        })
    }

    pub fn service(&self) -> &str {
        &self.service
    }

    pub fn request(&self) -> &[FieldDecl] {
        &self.request
    }

    pub fn response(&self) -> &[FieldDecl] {
        &self.response
    }

    pub fn calls(&self) -> &[LegacyCall] {
        &self.calls
    }

    /// Response fields and their sources in precedence order.
    pub fn aggregate(&self) -> &BTreeMap<String, Vec<Source>> {
        &self.aggregate
    }

    /// Call indices grouped by dependency depth: every call's dependencies
    /// lie in earlier stages. Calls keep declaration order within a stage.
    pub fn stages(&self) -> &[Vec<usize>] {
        &self.stages
    }

    pub fn signature(&self) -> ServiceSignature {
        ServiceSignature {
            name: self.service.clone(),
            request: self.request.clone(),
            response: self.response.clone(),
            transactional: false,
        }
    }
}

fn check_call(
    call: &LegacyCall,
    request: &[FieldDecl],
    calls: &[LegacyCall],
    index: &BTreeMap<&str, usize>,
) -> Result<(), TableError> {
    for dep in &call.depends_on {
        if !index.contains_key(dep.as_str()) {
            return Err(TableError::UnknownDependency {
                call: call.id.clone(),
                dependency: dep.clone(),
            });
        }
    }
    for f in call.request_spec.fields() {
        if !call.request_map.contains_key(&f.name) {
            return Err(TableError::Unmapped {
                call: call.id.clone(),
                field: f.name.clone(),
            });
        }
    }
    for (field, mapping) in &call.request_map {
        let bad = |reason: String| TableError::BadMapping {
            call: call.id.clone(),
            mapping: format!("{field} <- {mapping}"),
            reason,
        };
        if call.request_spec.field(field).is_none() {
            return Err(bad("target is not a field of the request layout".into()));
        }
        match mapping {
            Mapping::Request(name) if !request.iter().any(|d| &d.name == name) => {
                return Err(bad(format!("service request has no field `{name}`")));
            }
            Mapping::Call { call: other, field: name } => {
                let source = index
                    .get(other.as_str())
                    .map(|&i| &calls[i])
                    .ok_or_else(|| bad(format!("unknown call `{other}`")))?;
                if source.response_spec.field(name).is_none() {
                    return Err(bad(format!("call `{other}` has no response field `{name}`")));
                }
            }
            _ => {}
        }
    }
    let declared: BTreeSet<&str> = call.depends_on.iter().map(String::as_str).collect();
    let referenced = call.referenced_calls();
    if declared != referenced || declared.len() != call.depends_on.len() {
        return Err(TableError::DependsMismatch {
            call: call.id.clone(),
            declared: call.depends_on.clone(),
            referenced: referenced.into_iter().map(str::to_string).collect(),
        });
    }
    Ok(())
}

fn stage(calls: &[LegacyCall], index: &BTreeMap<&str, usize>) -> Result<Vec<Vec<usize>>, TableError> {
    let mut depth: Vec<Option<usize>> = vec![None; calls.len()];
    let mut remaining = calls.len();
    while remaining > 0 {
        let mut progressed = false;
        for (i, call) in calls.iter().enumerate() {
            if depth[i].is_some() {
                continue;
            }
            let deps: Option<Vec<usize>> = call.depends_on.iter().map(|d| depth[index[d.as_str()]]).collect();
            if let Some(deps) = deps {
                depth[i] = Some(deps.into_iter().max().map_or(0, |d| d + 1));
                remaining -= 1;
                progressed = true;
            }
        }
        if !progressed {
            let stuck = calls
                .iter()
                .zip(&depth)
                .filter(|(_, d)| d.is_none())
                .map(|(c, _)| c.id.clone())
                .collect();
            return Err(TableError::Cycle(stuck));
        }
    }
    let levels = depth.iter().flatten().max().map_or(0, |d| d + 1);
    let mut stages = vec![Vec::new(); levels];
    for (i, d) in depth.into_iter().enumerate() {
        stages[d.expect("all calls staged")].push(i);
    }
    Ok(stages)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) const CUSTOMER_360: &str = r#"{
      "service": "getCustomer360",
      "request": [ {"name": "customerId", "kind": "text"} ],
      "response": [ {"name": "name", "kind": "text"},
                    {"name": "policies", "kind": "integer"},
                    {"name": "balance", "kind": "decimal"} ],
      "calls": [
        { "id": "pol", "endpoint": "POLADM",
          "request_spec": {"length": 10, "fields": [
              {"name": "op", "offset": 0, "length": 4, "kind": "text"},
              {"name": "cust", "offset": 4, "length": 6, "kind": "text"}]},
          "request_map": {"op": "lit:INQ", "cust": "req.customerId"},
          "response_spec": {"length": 20, "fields": [
              {"name": "name", "offset": 0, "length": 16, "kind": "text"},
              {"name": "count", "offset": 16, "length": 4, "kind": "integer"}]} },
        { "id": "bill", "endpoint": "BILLSYS",
          "request_spec": {"length": 6, "fields": [
              {"name": "acct", "offset": 0, "length": 6, "kind": "text"}]},
          "request_map": {"acct": "req.customerId"},
          "response_spec": {"length": 26, "fields": [
              {"name": "holder", "offset": 0, "length": 16, "kind": "text"},
              {"name": "balance", "offset": 16, "length": 10, "kind": "decimal", "scale": 2}]} }
      ],
      "aggregate": {
        "name": ["call:pol.name", "call:bill.holder"],
        "policies": ["call:pol.count"],
        "balance": ["call:bill.balance"]
      }
    }"#;

    fn table(doc: &str) -> Result<BrokerTable, TableError> {
        doc.parse()
    }

    fn edit(f: impl FnOnce(&mut serde_json::Value)) -> String {
        let mut v: serde_json::Value = serde_json::from_str(CUSTOMER_360).unwrap();
        f(&mut v);
        v.to_string()
    }

    #[test]
    fn reference_table_has_one_stage() {
        let t = table(CUSTOMER_360).unwrap();
        assert_eq!(t.stages(), &[vec![0, 1]]);
        assert_eq!(t.signature().response.len(), 3);
    }

    #[test]
    fn dependencies_create_stages() {
        let doc = edit(|v| {
            v["calls"][1]["depends_on"] = serde_json::json!(["pol"]);
            v["calls"][1]["request_map"]["acct"] = "call:pol.name".into();
        });
        assert_eq!(table(&doc).unwrap().stages(), &[vec![0], vec![1]]);
    }

    #[test]
    fn depends_on_must_match_references() {
        let missing = edit(|v| v["calls"][1]["request_map"]["acct"] = "call:pol.name".into());
        assert!(matches!(table(&missing), Err(TableError::Parse(m)) if m.contains("depends_on")));
        let extra = edit(|v| v["calls"][1]["depends_on"] = serde_json::json!(["pol"]));
        assert!(matches!(table(&extra), Err(TableError::Parse(m)) if m.contains("depends_on")));
    }

    #[test]
    fn cycles_are_rejected() {
        let doc = edit(|v| {
            v["calls"][0]["depends_on"] = serde_json::json!(["bill"]);
            v["calls"][0]["request_map"]["cust"] = "call:bill.holder".into();
            v["calls"][1]["depends_on"] = serde_json::json!(["pol"]);
            v["calls"][1]["request_map"]["acct"] = "call:pol.name".into();
        });
        assert!(matches!(table(&doc), Err(TableError::Parse(m)) if m.contains("cycle")));
    }

    #[test]
    fn coverage_and_mapping_errors() {
        let cases = [
            (edit(|v| v["aggregate"]["balance"] = serde_json::json!([])), "no source"),
            (edit(|v| v["aggregate"]["balance"] = serde_json::json!(["call:bill.nope"])), "not a response field"),
            (edit(|v| v["calls"][0]["request_map"]["cust"] = "req.nope".into()), "no field `nope`"),
            (edit(|v| v["calls"][0]["request_map"]["cust"] = "junk".into()), "bad mapping"),
            (edit(|v| { v["calls"][0]["request_map"].as_object_mut().unwrap().remove("op"); }), "no mapping"),
            (edit(|v| v["calls"][1]["id"] = "pol".into()), "twice"),
        ];
        for (doc, needle) in cases {
            let err = table(&doc).unwrap_err().to_string();
            assert!(err.contains(needle), "{needle}: {err}");
        }
    }

    #[test]
    fn mappings_round_trip_as_text() {
        for s in ["req.a", "lit:", "lit:X Y", "call:c.f"] {
            assert_eq!(s.parse::<Mapping>().unwrap().to_string(), s);
        }
        assert!("call:c".parse::<Mapping>().is_err());
        assert!("call:.f".parse::<Source>().is_err());
    }
}
