//! Logical components built from layered internal components, their external
//! interfaces, and the rules governing calls between layers.

mod layering;
mod manifest;
mod runtime;

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::value::{FieldKind, Fields, ValueError};

pub use layering::{validate_layering, CallEdge, Callee, EdgesFile, LabeledEdge, Rule, Violation, ViolationReport};
pub use manifest::load_manifest;
pub use runtime::{CallError, Invocation, ServiceHandler, ServiceRuntime};

/// The five layers. `EndClient` is the highest, `SharedBusinessResource` the
/// lowest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum LayerKind {
    EndClient,
    BusinessProcess,
    BusinessService,
    SharedBusinessResourceService,
    SharedBusinessResource,
}

impl LayerKind {
    pub const ALL: [LayerKind; 5] = [
        LayerKind::EndClient,
        LayerKind::BusinessProcess,
        LayerKind::BusinessService,
        LayerKind::SharedBusinessResourceService,
        LayerKind::SharedBusinessResource,
    ];

    fn rank(self) -> u8 {
        match self {
            LayerKind::EndClient => 4,
            LayerKind::BusinessProcess => 3,
            LayerKind::BusinessService => 2,
            LayerKind::SharedBusinessResourceService => 1,
            LayerKind::SharedBusinessResource => 0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::EndClient => "end_client",
            LayerKind::BusinessProcess => "business_process",
            LayerKind::BusinessService => "business_service",
            LayerKind::SharedBusinessResourceService => "sbrs",
            LayerKind::SharedBusinessResource => "sbr",
        }
    }

    /// Layers whose services may appear in an external interface.
    pub fn exportable(self) -> bool {
        matches!(
            self,
            LayerKind::BusinessService | LayerKind::SharedBusinessResourceService
        )
    }
}

impl PartialOrd for LayerKind {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for LayerKind {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank().cmp(&other.rank())
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LayerKind::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FieldDecl {
    pub name: String,
    pub kind: FieldKind,
}

impl FieldDecl {
    pub fn new(name: impl Into<String>, kind: FieldKind) -> Self {
        FieldDecl {
            name: name.into(),
            kind,
        }
    }
}

/// Checks `fields` against `decls`: every declared field must be present and
/// convertible to its kind, and nothing undeclared may appear. Returns the
/// coerced fields.
pub fn conform(fields: &Fields, decls: &[FieldDecl]) -> Result<Fields, String> {
    if let Some(extra) = fields.keys().find(|k| !decls.iter().any(|d| &d.name == *k)) {
        return Err(format!("undeclared field `{extra}`"));
    }
    decls
        .iter()
        .map(|d| {
            let value = fields
                .get(&d.name)
                .ok_or_else(|| format!("missing field `{}`", d.name))?;
            let coerced = value
                .coerce(d.kind)
                .map_err(|e: ValueError| format!("field `{}`: {e}", d.name))?;
            Ok((d.name.clone(), coerced))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ServiceSignature {
    pub name: String,
    pub request: Vec<FieldDecl>,
    pub response: Vec<FieldDecl>,
    pub transactional: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InternalComponent {
    pub name: String,
    pub layer: LayerKind,
    pub provides: Vec<ServiceSignature>,
    pub owner: String,
}

impl InternalComponent {
    pub fn service(&self, name: &str) -> Option<&ServiceSignature> {
        self.provides.iter().find(|s| s.name == name)
    }
}

/// `internal.service` entry of an external interface.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct ExportRef {
    pub internal: String,
    pub service: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LogicalComponent {
    pub name: String,
    pub internals: Vec<InternalComponent>,
    pub exports: Vec<ExportRef>,
}

impl LogicalComponent {
    pub fn internal(&self, name: &str) -> Option<&InternalComponent> {
        self.internals.iter().find(|i| i.name == name)
    }

    pub fn export(&self, service: &str) -> Option<&ExportRef> {
        self.exports.iter().find(|e| e.service == service)
    }

    pub fn exports_internal_service(&self, internal: &str, service: &str) -> bool {
        self.exports
            .iter()
            .any(|e| e.internal == internal && e.service == service)
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("malformed document: {0}")]
    Parse(String),
    #[error("duplicate logical component `{0}`")]
    DuplicateComponent(String),
    #[error("duplicate internal component `{internal}` in `{component}`")]
    DuplicateInternal { component: String, internal: String },
    #[error("`{component}.{internal}` declares service `{service}` twice")]
    DuplicateService { component: String, internal: String, service: String },
    #[error("service `{service}` declares {direction} field `{field}` twice")]
    DuplicateField { service: String, direction: &'static str, field: String },
    #[error("`{component}.{internal}` has unknown layer `{layer}`")]
    UnknownLayer { component: String, internal: String, layer: String },
    #[error("resource component `{component}.{internal}` cannot provide services")]
    ResourceProvidesServices { component: String, internal: String },
    #[error("export `{export}` of `{component}`: {reason}")]
    BadExport { component: String, export: String, reason: String },
    #[error("`{component}` exports `{export}` from the {layer} layer")]
    ExportedLayer { component: String, export: String, layer: LayerKind },
    #[error("unknown logical component `{0}`")]
    UnknownComponent(String),
    #[error("unknown internal component `{component}.{internal}`")]
    UnknownInternal { component: String, internal: String },
    #[error("`{component}.{internal}` does not provide `{service}`")]
    UnknownService { component: String, internal: String, service: String },
    #[error("`{component}` does not export `{service}`")]
    NotExported { component: String, service: String },
    #[error("`{component}` has several providers of `{service}`")]
    AmbiguousService { component: String, service: String },
    #[error("edge from `{0}` to itself")]
    SelfEdge(String),
}

/// Immutable, validated set of logical components.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ComponentModel {
    components: Vec<LogicalComponent>,
}

impl ComponentModel {
    /// Builds a model, checking every structural invariant.
    pub fn new(components: Vec<LogicalComponent>) -> Result<Self, ModelError> {
        for (i, lc) in components.iter().enumerate() {
            if components[..i].iter().any(|c| c.name == lc.name) {
                return Err(ModelError::DuplicateComponent(lc.name.clone()));
            }
            check_component(lc)?;
        }
        Ok(ComponentModel { components })
    }

    pub fn components(&self) -> &[LogicalComponent] {
        &self.components
    }

    pub fn component(&self, name: &str) -> Result<&LogicalComponent, ModelError> {
        self.components
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| ModelError::UnknownComponent(name.to_string()))
    }

    pub fn internal(&self, component: &str, internal: &str) -> Result<&InternalComponent, ModelError> {
        self.component(component)?
            .internal(internal)
            .ok_or_else(|| ModelError::UnknownInternal {
                component: component.to_string(),
                internal: internal.to_string(),
            })
    }

    /// The internal component behind an exported service.
    pub fn resolve_binding(&self, component: &str, service: &str) -> Result<&InternalComponent, ModelError> {
        let lc = self.component(component)?;
        let export = lc.export(service).ok_or_else(|| ModelError::NotExported {
            component: component.to_string(),
            service: service.to_string(),
        })?;
        lc.internal(&export.internal)
            .ok_or_else(|| ModelError::UnknownInternal {
                component: component.to_string(),
                internal: export.internal.clone(),
            })
    }

    /// Any internal provider of `service` inside `component`, exported or
    /// not. Used for calls that stay within one logical component.
    pub fn locate(&self, component: &str, service: &str) -> Result<&InternalComponent, ModelError> {
        let lc = self.component(component)?;
        let mut providers = lc.internals.iter().filter(|i| i.service(service).is_some());
        match (providers.next(), providers.next()) {
            (Some(only), None) => Ok(only),
            (Some(_), Some(_)) => lc
                .export(service)
                .and_then(|e| lc.internal(&e.internal))
                .ok_or_else(|| ModelError::AmbiguousService {
                    component: component.to_string(),
                    service: service.to_string(),
                }),
            (None, _) => Err(ModelError::UnknownService {
                component: component.to_string(),
                internal: "*".into(),
                service: service.to_string(),
            }),
        }
    }

    pub fn signature(&self, component: &str, service: &str) -> Result<&ServiceSignature, ModelError> {
        Ok(self
            .locate(component, service)?
            .service(service)
            .expect("located provider declares the service"))
    }
}

fn check_component(lc: &LogicalComponent) -> Result<(), ModelError> {
    for (i, internal) in lc.internals.iter().enumerate() {
        if lc.internals[..i].iter().any(|o| o.name == internal.name) {
            return Err(ModelError::DuplicateInternal {
                component: lc.name.clone(),
                internal: internal.name.clone(),
            });
        }
        if internal.layer == LayerKind::SharedBusinessResource && !internal.provides.is_empty() {
            return Err(ModelError::ResourceProvidesServices {
                component: lc.name.clone(),
                internal: internal.name.clone(),
            });
        }
        for (j, svc) in internal.provides.iter().enumerate() {
            if internal.provides[..j].iter().any(|o| o.name == svc.name) {
                return Err(ModelError::DuplicateService {
                    component: lc.name.clone(),
                    internal: internal.name.clone(),
                    service: svc.name.clone(),
                });
            }
            for (direction, fields) in [("request", &svc.request), ("response", &svc.response)] {
                for (k, f) in fields.iter().enumerate() {
                    if fields[..k].iter().any(|o| o.name == f.name) {
                        return Err(ModelError::DuplicateField {
                            service: svc.name.clone(),
                            direction,
                            field: f.name.clone(),
                        });
                    }
                }
            }
        }
    }
    for (i, export) in lc.exports.iter().enumerate() {
        let label = format!("{}.{}", export.internal, export.service);
        let bad = |reason: &str| ModelError::BadExport {
            component: lc.name.clone(),
            export: label.clone(),
            reason: reason.to_string(),
        };
        let internal = lc.internal(&export.internal).ok_or_else(|| bad("unknown internal component"))?;
        if internal.service(&export.service).is_none() {
            return Err(bad("service not provided"));
        }
        if !internal.layer.exportable() {
            return Err(ModelError::ExportedLayer {
                component: lc.name.clone(),
                export: label,
                layer: internal.layer,
            });
        }
        if lc.exports[..i].iter().any(|e| e.service == export.service) {
            return Err(bad("service name exported twice"));
        }
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod fixture {
    pub const MANIFEST: &str = r#"{
      "components": [
        { "name": "Customer",
          "internals": [
            { "name": "Portal", "layer": "end_client" },
            { "name": "Onboarding", "layer": "business_process",
              "provides": [ { "name": "onboard" } ] },
            { "name": "CustomerService", "layer": "business_service",
              "provides": [ { "name": "register", "transactional": true,
                              "request": [ {"name": "id", "kind": "text"} ] } ] },
            { "name": "CustomerData", "layer": "sbrs",
              "provides": [
                { "name": "getCustomer", "transactional": true,
                  "request": [ {"name": "id", "kind": "text"} ],
                  "response": [ {"name": "name", "kind": "text"} ] },
                { "name": "countCustomers" },
                { "name": "purge", "transactional": true } ] },
            { "name": "CustomerDb", "layer": "sbr" }
          ],
          "exports": [ "CustomerService.register", "CustomerData.getCustomer", "CustomerData.countCustomers" ] },
        { "name": "Contract",
          "internals": [
            { "name": "ContractPortal", "layer": "end_client" },
            { "name": "ContractService", "layer": "business_service",
              "provides": [ { "name": "issue", "transactional": true } ] },
            { "name": "ContractData", "layer": "sbrs",
              "provides": [ { "name": "store", "transactional": true } ] }
          ],
          "exports": [ "ContractService.issue" ] }
      ]
    }"#;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_order_is_total_and_descending() {
        let mut sorted = LayerKind::ALL.to_vec();
        sorted.sort();
        sorted.reverse();
        assert_eq!(sorted, LayerKind::ALL);
        assert!(LayerKind::EndClient > LayerKind::BusinessProcess);
        assert!(LayerKind::SharedBusinessResourceService > LayerKind::SharedBusinessResource);
    }

    #[test]
    fn resolve_binding_cases() {
        let model = load_manifest(fixture::MANIFEST).unwrap();
        let provider = model.resolve_binding("Customer", "getCustomer").unwrap();
        assert_eq!(provider.name, "CustomerData");
        assert_eq!(provider.layer, LayerKind::SharedBusinessResourceService);
        assert!(matches!(
            model.resolve_binding("Customer", "purge"),
            Err(ModelError::NotExported { .. })
        ));
        assert!(matches!(
            ComponentModel::default().resolve_binding("Customer", "getCustomer"),
            Err(ModelError::UnknownComponent(_))
        ));
    }

    #[test]
    fn locate_finds_unexported_services() {
        let model = load_manifest(fixture::MANIFEST).unwrap();
        assert_eq!(model.locate("Customer", "purge").unwrap().name, "CustomerData");
        assert!(model.locate("Customer", "nothing").is_err());
    }

    #[test]
    fn conform_checks_and_coerces() {
        let decls = vec![FieldDecl::new("n", FieldKind::Integer)];
        let mut f = Fields::new();
        f.insert("n".into(), "12".into());
        assert_eq!(conform(&f, &decls).unwrap()["n"], crate::value::Value::Integer(12));
        f.insert("x".into(), "1".into());
        assert!(conform(&f, &decls).is_err());
        assert!(conform(&Fields::new(), &decls).is_err());
    }
}
