use serde::Deserialize;

use super::{ComponentModel, ExportRef, FieldDecl, InternalComponent, LayerKind, LogicalComponent, ModelError, ServiceSignature};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    #[serde(default)]
    components: Vec<RawComponent>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawComponent {
    name: String,
    #[serde(default)]
    internals: Vec<RawInternal>,
    #[serde(default)]
    exports: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInternal {
    name: String,
    layer: String,
    #[serde(default)]
    provides: Vec<RawService>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawService {
    name: String,
    #[serde(default)]
    transactional: bool,
    #[serde(default)]
    request: Vec<FieldDecl>,
    #[serde(default)]
    response: Vec<FieldDecl>,
}

impl<'de> Deserialize<'de> for FieldDecl {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            name: String,
            kind: crate::value::FieldKind,
        }
        let raw = Raw::deserialize(deserializer)?;
        Ok(FieldDecl::new(raw.name, raw.kind))
    }
}

/// Parses a JSON component manifest and validates it.
pub fn load_manifest(document: &str) -> Result<ComponentModel, ModelError> {
    let raw: RawManifest = serde_json::from_str(document).map_err(|e| ModelError::Parse(e.to_string()))?;
    let mut components = Vec::with_capacity(raw.components.len());
    for rc in raw.components {
        let mut internals = Vec::with_capacity(rc.internals.len());
        for ri in rc.internals {
            let layer: LayerKind = ri.layer.parse().map_err(|layer| ModelError::UnknownLayer {
                component: rc.name.clone(),
                internal: ri.name.clone(),
                layer,
            })?;
            internals.push(InternalComponent {
                name: ri.name,
                layer,
                provides: ri
                    .provides
                    .into_iter()
                    .map(|s| ServiceSignature {
                        name: s.name,
                        request: s.request,
                        response: s.response,
                        transactional: s.transactional,
                    })
                    .collect(),
                owner: rc.name.clone(),
            });
        }
        let exports = rc
            .exports
            .iter()
            .map(|e| match e.split_once('.') {
                Some((internal, service)) if !internal.is_empty() && !service.is_empty() => Ok(ExportRef {
                    internal: internal.to_string(),
                    service: service.to_string(),
                }),
                _ => Err(ModelError::BadExport {
                    component: rc.name.clone(),
                    export: e.clone(),
                    reason: "expected `internal.service`".into(),
                }),
            })
            .collect::<Result<Vec<_>, _>>()?;
        components.push(LogicalComponent {
            name: rc.name,
            internals,
            exports,
        });
    }
    ComponentModel::new(components)
}
