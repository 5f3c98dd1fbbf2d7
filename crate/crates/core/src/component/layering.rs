//! Offline validation of declared call edges against the allowed-call
//! matrix.
//!
//! Within one logical component:
//!
//! | caller            | may call                                  |
//! |-------------------|-------------------------------------------|
//! | end client        | business process, business service        |
//! | business process  | business process, business service        |
//! | business service  | business service, sbrs                    |
//! | sbrs              | sbr resource handles, broker adapters     |
//! | sbr               | nothing                                   |
//!
//! Across logical components, only business process and business service
//! components may call, and only services in the callee's external
//! interface.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ComponentModel, LayerKind, ModelError};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Callee {
    Service {
        component: String,
        internal: String,
        service: String,
    },
    /// A broker adapter for a legacy endpoint.
    Adapter(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CallEdge {
    pub caller_component: String,
    pub caller_internal: String,
    pub callee: Callee,
}

impl CallEdge {
    pub fn service(caller: (&str, &str), callee: (&str, &str, &str)) -> Self {
        CallEdge {
            caller_component: caller.0.to_string(),
            caller_internal: caller.1.to_string(),
            callee: Callee::Service {
                component: callee.0.to_string(),
                internal: callee.1.to_string(),
                service: callee.2.to_string(),
            },
        }
    }

    pub fn adapter(caller: (&str, &str), endpoint: &str) -> Self {
        CallEdge {
            caller_component: caller.0.to_string(),
            caller_internal: caller.1.to_string(),
            callee: Callee::Adapter(endpoint.to_string()),
        }
    }

    /// Parses `Component.Internal` and `Component.Internal.service` (or
    /// `adapter:<endpoint>`).
    pub fn parse(caller: &str, callee: &str) -> Result<Self, ModelError> {
        let malformed = |s: &str| ModelError::Parse(format!("malformed edge endpoint `{s}`"));
        let (cc, ci) = caller.split_once('.').ok_or_else(|| malformed(caller))?;
        if cc.is_empty() || ci.is_empty() || ci.contains('.') {
            return Err(malformed(caller));
        }
        if let Some(endpoint) = callee.strip_prefix("adapter:") {
            if endpoint.is_empty() {
                return Err(malformed(callee));
            }
            return Ok(CallEdge::adapter((cc, ci), endpoint));
        }
        let parts: Vec<&str> = callee.split('.').collect();
        match parts.as_slice() {
            [c, i, s] if !c.is_empty() && !i.is_empty() && !s.is_empty() => Ok(CallEdge::service((cc, ci), (c, i, s))),
            // Resource leaves are addressed as a whole.
            [c, i] if !c.is_empty() && !i.is_empty() => Ok(CallEdge::service((cc, ci), (c, i, ""))),
            _ => Err(malformed(callee)),
        }
    }
}

impl fmt::Display for CallEdge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{} -> ", self.caller_component, self.caller_internal)?;
        match &self.callee {
            Callee::Service {
                component,
                internal,
                service,
            } if service.is_empty() => write!(f, "{component}.{internal}"),
            Callee::Service {
                component,
                internal,
                service,
            } => write!(f, "{component}.{internal}.{service}"),
            Callee::Adapter(endpoint) => write!(f, "adapter:{endpoint}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rule {
    ResourceLeafCaller,
    AdapterOutsideSbrs,
    UpwardCall,
    EndClientCrossComponent,
    CrossComponentCaller,
    NotExported,
    DirectResourceTouch,
    EndClientLayerSkip,
    NotInMatrix,
}

impl Rule {
    pub fn id(self) -> &'static str {
        match self {
            Rule::ResourceLeafCaller => "resource-leaf-caller",
            Rule::AdapterOutsideSbrs => "adapter-outside-sbrs",
            Rule::UpwardCall => "upward-call",
            Rule::EndClientCrossComponent => "end-client-cross-component",
            Rule::CrossComponentCaller => "cross-component-caller",
            Rule::NotExported => "not-exported",
            Rule::DirectResourceTouch => "direct-resource-touch",
            Rule::EndClientLayerSkip => "end-client-layer-skip",
            Rule::NotInMatrix => "not-in-matrix",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Rule::ResourceLeafCaller => "shared business resources are leaves and make no calls",
            Rule::AdapterOutsideSbrs => "broker adapters are reachable only from the sbrs layer",
            Rule::UpwardCall => "no call from a lower layer to a higher layer",
            Rule::EndClientCrossComponent => {
                "end clients address only their own logical component"
            }
            Rule::CrossComponentCaller => {
                "only business process and business service components call other logical components"
            }
            Rule::NotExported => "cross-component calls must use the callee's external interface",
            Rule::DirectResourceTouch => "only sbrs components touch shared business resources",
            Rule::EndClientLayerSkip => "no layer skipping below BusinessService for end clients",
            Rule::NotInMatrix => "call not permitted by the layer matrix",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl Serialize for Rule {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.id())
    }
}

/// The target side of an edge as far as the matrix is concerned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CalleeKind {
    Layer(LayerKind),
    Adapter,
}

/// Applies the matrix to one call. `exported` only matters for
/// cross-component calls.
pub fn check_call(caller: LayerKind, callee: CalleeKind, cross_component: bool, exported: bool) -> Option<Rule> {
    use LayerKind::*;
    if caller == SharedBusinessResource {
        return Some(Rule::ResourceLeafCaller);
    }
    let callee = match callee {
        CalleeKind::Adapter => {
            return (caller != SharedBusinessResourceService).then_some(Rule::AdapterOutsideSbrs);
        }
        CalleeKind::Layer(l) => l,
    };
    if callee > caller {
        return Some(Rule::UpwardCall);
    }
    if cross_component {
        return match caller {
            EndClient => Some(Rule::EndClientCrossComponent),
            BusinessProcess | BusinessService => {
                if callee == SharedBusinessResource {
                    Some(Rule::DirectResourceTouch)
                } else if !exported {
                    Some(Rule::NotExported)
                } else {
                    None
                }
            }
            _ => Some(Rule::CrossComponentCaller),
        };
    }
    let allowed = matches!(
        (caller, callee),
        (EndClient, BusinessProcess | BusinessService)
            | (BusinessProcess, BusinessProcess | BusinessService)
            | (BusinessService, BusinessService | SharedBusinessResourceService)
            | (SharedBusinessResourceService, SharedBusinessResource)
    );
    if allowed {
        None
    } else if callee == SharedBusinessResource {
        Some(Rule::DirectResourceTouch)
    } else if caller == EndClient {
        Some(Rule::EndClientLayerSkip)
    } else {
        Some(Rule::NotInMatrix)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    /// Position of the edge in the input.
    pub index: usize,
    pub edge: String,
    pub rule: Rule,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ViolationReport {
    pub violations: Vec<Violation>,
}

impl ViolationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.violations.len()
    }
}

impl fmt::Display for ViolationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return writeln!(f, "model conforms: no layering violations");
        }
        for v in &self.violations {
            writeln!(f, "#{} {} [{}] {}", v.index, v.edge, v.rule, v.reason)?;
        }
        writeln!(f, "{} violation(s)", self.violations.len())
    }
}

/// Reports every edge that breaks the matrix, in input order.
pub fn validate_layering(model: &ComponentModel, edges: &[CallEdge]) -> Result<ViolationReport, ModelError> {
    let mut report = ViolationReport::default();
    for (index, edge) in edges.iter().enumerate() {
        let caller = model.internal(&edge.caller_component, &edge.caller_internal)?;
        let (callee_kind, cross, exported) = match &edge.callee {
            Callee::Adapter(_) => (CalleeKind::Adapter, false, false),
            Callee::Service {
                component,
                internal,
                service,
            } => {
                if component == &edge.caller_component && internal == &edge.caller_internal {
                    return Err(ModelError::SelfEdge(format!("{component}.{internal}")));
                }
                let target = model.internal(component, internal)?;
                // Resource leaves are addressed by handle, not by service.
                if target.layer != LayerKind::SharedBusinessResource && target.service(service).is_none() {
                    return Err(ModelError::UnknownService {
                        component: component.clone(),
                        internal: internal.clone(),
                        service: service.clone(),
                    });
                }
                let exported = model.component(component)?.exports_internal_service(internal, service);
                (
                    CalleeKind::Layer(target.layer),
                    component != &edge.caller_component,
                    exported,
                )
            }
        };
        if let Some(rule) = check_call(caller.layer, callee_kind, cross, exported) {
            report.violations.push(Violation {
                index,
                edge: edge.to_string(),
                rule,
                reason: rule.description().to_string(),
            });
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expectation {
    Legal,
    Violation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledEdge {
    #[serde(default)]
    pub label: Option<String>,
    pub caller: String,
    pub callee: String,
    #[serde(default)]
    pub expect: Option<Expectation>,
}

/// Edges document: `{ "edges": [ { label?, caller, callee, expect? } ] }`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgesFile {
    pub edges: Vec<LabeledEdge>,
}

impl FromStr for EdgesFile {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_str(s).map_err(|e| ModelError::Parse(e.to_string()))
    }
}

impl EdgesFile {
    pub fn call_edges(&self) -> Result<Vec<CallEdge>, ModelError> {
        self.edges.iter().map(|e| CallEdge::parse(&e.caller, &e.callee)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::component::fixture::MANIFEST;
    use crate::component::load_manifest;

    fn model() -> ComponentModel {
        load_manifest(MANIFEST).unwrap()
    }

    fn rules(edges: &[CallEdge]) -> Vec<Rule> {
        validate_layering(&model(), edges)
            .unwrap()
            .violations
            .into_iter()
            .map(|v| v.rule)
            .collect()
    }

    #[test]
    fn end_client_skipping_to_sbrs() {
        let edge = CallEdge::service(("Customer", "Portal"), ("Customer", "CustomerData", "getCustomer"));
        let report = validate_layering(&model(), &[edge]).unwrap();
        assert_eq!(report.len(), 1);
        assert_eq!(report.violations[0].rule, Rule::EndClientLayerSkip);
        assert_eq!(
            report.violations[0].reason,
            "no layer skipping below BusinessService for end clients"
        );
    }

    #[test]
    fn cross_component_service_to_exported_sbrs_is_legal() {
        let edge = CallEdge::service(("Contract", "ContractService"), ("Customer", "CustomerData", "getCustomer"));
        assert!(rules(&[edge]).is_empty());
    }

    #[test]
    fn business_service_touching_resource() {
        let edge = CallEdge::service(("Customer", "CustomerService"), ("Customer", "CustomerDb", "customers"));
        assert_eq!(rules(&[edge]), vec![Rule::DirectResourceTouch]);
    }

    #[test]
    fn adapters_only_from_sbrs() {
        assert!(rules(&[CallEdge::adapter(("Customer", "CustomerData"), "POLADM")]).is_empty());
        assert_eq!(
            rules(&[CallEdge::adapter(("Customer", "CustomerService"), "POLADM")]),
            vec![Rule::AdapterOutsideSbrs]
        );
    }

    #[test]
    fn cross_component_rules() {
        let edges = [
            CallEdge::service(("Contract", "ContractPortal"), ("Customer", "CustomerService", "register")),
            CallEdge::service(("Contract", "ContractService"), ("Customer", "CustomerData", "purge")),
            CallEdge::service(("Contract", "ContractData"), ("Customer", "CustomerData", "getCustomer")),
            CallEdge::service(("Customer", "Onboarding"), ("Contract", "ContractService", "issue")),
        ];
        assert_eq!(
            rules(&edges),
            vec![Rule::EndClientCrossComponent, Rule::NotExported, Rule::CrossComponentCaller]
        );
    }

    #[test]
    fn unknown_endpoints_and_self_edges_are_errors() {
        let m = model();
        let bad = [
            CallEdge::service(("Nowhere", "X"), ("Customer", "CustomerData", "getCustomer")),
            CallEdge::service(("Customer", "Portal"), ("Customer", "Ghost", "x")),
            CallEdge::service(("Customer", "Portal"), ("Customer", "CustomerService", "nothing")),
            CallEdge::service(("Customer", "CustomerService"), ("Customer", "CustomerService", "register")),
        ];
        for edge in bad {
            assert!(validate_layering(&m, std::slice::from_ref(&edge)).is_err(), "{edge}");
        }
    }

    #[test]
    fn report_follows_input_order() {
        let edges = [
            CallEdge::service(("Customer", "CustomerData"), ("Customer", "CustomerService", "register")),
            CallEdge::service(("Customer", "Portal"), ("Customer", "CustomerService", "register")),
            CallEdge::service(("Customer", "CustomerService"), ("Customer", "CustomerDb", "x")),
        ];
        let report = validate_layering(&model(), &edges).unwrap();
        let indices: Vec<usize> = report.violations.iter().map(|v| v.index).collect();
        assert_eq!(indices, vec![0, 2]);
        assert_eq!(report, validate_layering(&model(), &edges).unwrap());
    }

    #[test]
    fn edge_parsing() {
        assert!(CallEdge::parse("A.B", "C.D.e").is_ok());
        assert_eq!(
            CallEdge::parse("A.B", "adapter:X").unwrap().callee,
            Callee::Adapter("X".into())
        );
        assert_eq!(CallEdge::parse("A.B", "C.D").unwrap().to_string(), "A.B -> C.D");
        for (caller, callee) in [("A", "C.D.e"), ("A.B", "C"), ("A.B", "C."), ("A.B", "adapter:"), ("A.B.C", "C.D.e")] {
            assert!(CallEdge::parse(caller, callee).is_err());
        }
    }
}
