use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use super::{conform, ComponentModel, ModelError};
use crate::rm::RmError;
use crate::sim::{EventKind, Trace};
use crate::txn::{TransactionContext, TxnError};
use crate::value::Fields;

#[derive(Debug, thiserror::Error)]
pub enum CallError {
    #[error(transparent)]
    Binding(#[from] ModelError),
    #[error("`{component}.{service}` is not transactional")]
    NotTransactional { component: String, service: String },
    #[error("no implementation registered for `{component}.{service}`")]
    NoHandler { component: String, service: String },
    #[error("request to `{service}`: {reason}")]
    BadRequest { service: String, reason: String },
    #[error("response from `{service}`: {reason}")]
    BadResponse { service: String, reason: String },
    #[error(transparent)]
    Txn(#[from] TxnError),
    #[error(transparent)]
    Rm(#[from] RmError),
    #[error("{0}")]
    Failed(String),
}

/// What a service implementation sees when it is called.
pub struct Invocation<'a> {
    pub component: &'a str,
    pub service: &'a str,
    pub ctx: Option<&'a TransactionContext>,
    pub runtime: &'a ServiceRuntime,
}

pub trait ServiceHandler: Send + Sync {
    fn call(&self, inv: &Invocation<'_>, request: &Fields) -> Result<Fields, CallError>;
}

impl<F> ServiceHandler for F
where
    F: Fn(&Invocation<'_>, &Fields) -> Result<Fields, CallError> + Send + Sync,
{
    fn call(&self, inv: &Invocation<'_>, request: &Fields) -> Result<Fields, CallError> {
        self(inv, request)
    }
}

/// Binds service implementations to the services declared in a model.
#[derive(Clone)]
pub struct ServiceRuntime {
    model: Arc<ComponentModel>,
    handlers: BTreeMap<(String, String), Arc<dyn ServiceHandler>>,
    trace: Trace,
}

impl fmt::Debug for ServiceRuntime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ServiceRuntime")
            .field("handlers", &self.handlers.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl ServiceRuntime {
    pub fn new(model: Arc<ComponentModel>, trace: Trace) -> Self {
        ServiceRuntime {
            model,
            handlers: BTreeMap::new(),
            trace,
        }
    }

    pub fn model(&self) -> &ComponentModel {
        &self.model
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn register(
        &mut self,
        component: &str,
        service: &str,
        handler: impl ServiceHandler + 'static,
    ) -> Result<(), ModelError> {
        self.model.locate(component, service)?;
        self.handlers
            .insert((component.to_string(), service.to_string()), Arc::new(handler));
        Ok(())
    }

    /// Calls a service of `component` from inside the same logical
    /// component. Non-transactional services are called without a context.
    pub fn call(
        &self,
        ctx: Option<&TransactionContext>,
        component: &str,
        service: &str,
        request: &Fields,
    ) -> Result<Fields, CallError> {
        let signature = self.model.signature(component, service)?;
        let ctx = if signature.transactional { ctx } else { None };
        self.dispatch(ctx, component, service, request)
    }

    /// Checks the request against the declared signature, runs the handler
    /// and checks its response.
    pub(crate) fn dispatch(
        &self,
        ctx: Option<&TransactionContext>,
        component: &str,
        service: &str,
        request: &Fields,
    ) -> Result<Fields, CallError> {
        let signature = self.model.signature(component, service)?;
        let request = conform(request, &signature.request).map_err(|reason| CallError::BadRequest {
            service: service.to_string(),
            reason,
        })?;
        let handler = self
            .handlers
            .get(&(component.to_string(), service.to_string()))
            .ok_or_else(|| CallError::NoHandler {
                component: component.to_string(),
                service: service.to_string(),
            })?;
        self.trace.record(EventKind::ServiceCall {
            component: component.to_string(),
            service: service.to_string(),
            txn: ctx.map(|c| c.id()),
        });
        let inv = Invocation {
            component,
            service,
            ctx,
            runtime: self,
        };
        let response = handler.call(&inv, &request)?;
        conform(&response, &signature.response).map_err(|reason| CallError::BadResponse {
            service: service.to_string(),
            reason,
        })
    }
}
