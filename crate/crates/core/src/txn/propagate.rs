use crate::component::{CallError, ServiceRuntime};
use crate::txn::{TransactionContext, TxnError, TxnStatus};
use crate::value::Fields;

/// Calls an exported service of another logical component inside `ctx`.
/// Whatever the callee touches enlists into the same transaction.
pub fn propagate(
    ctx: &TransactionContext,
    runtime: &ServiceRuntime,
    callee: (&str, &str),
    request: &Fields,
) -> Result<Fields, CallError> {
    let (component, service) = callee;
    match ctx.status() {
        Some(TxnStatus::Active) => {}
        Some(status) => return Err(TxnError::NotActive(ctx.id(), status).into()),
        None => return Err(TxnError::CoordinatorDown.into()),
    }
    let provider = runtime.model().resolve_binding(component, service)?;
    let transactional = provider.service(service).is_some_and(|s| s.transactional);
    if !transactional {
        return Err(CallError::NotTransactional {
            component: component.to_string(),
            service: service.to_string(),
        });
    }
    runtime.dispatch(Some(ctx), component, service, request)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::component::fixture::MANIFEST;
    use crate::component::{load_manifest, Invocation};
    use crate::log::DurableLog;
    use crate::rm::ManagedStore;
    use crate::sim::Trace;
    use crate::txn::{Coordinator, Outcome};
    use crate::value::Value;

    struct World {
        coord: Coordinator,
        runtime: ServiceRuntime,
        customers: Arc<ManagedStore>,
        contracts: Arc<ManagedStore>,
    }

    fn world() -> World {
        let trace = Trace::new();
        let coord = Coordinator::new(DurableLog::in_memory(), trace.clone()).unwrap();
        let customers = Arc::new(ManagedStore::in_memory("customers", trace.clone()));
        let contracts = Arc::new(ManagedStore::in_memory("contracts", trace.clone()));
        coord.register(customers.clone()).unwrap();
        coord.register(contracts.clone()).unwrap();
        let model = Arc::new(load_manifest(MANIFEST).unwrap());
        let mut runtime = ServiceRuntime::new(model, trace);
        let store = customers.clone();
        runtime
            .register("Customer", "getCustomer", move |inv: &Invocation<'_>, req: &Fields| {
                let id = req["id"].to_string();
                let ctx = inv.ctx.expect("transactional call");
                let name = store.get(ctx, &id)?.unwrap_or_default();
                store.put(ctx, &format!("seen:{id}"), b"1".to_vec())?;
                Ok(Fields::from([("name".to_string(), Value::Text(String::from_utf8_lossy(&name).into()))]))
            })
            .unwrap();
        let store = customers.clone();
        runtime
            .register("Customer", "purge", move |inv: &Invocation<'_>, _req: &Fields| {
                store.delete(inv.ctx.unwrap(), "x")?;
                Ok(Fields::new())
            })
            .unwrap();
        World {
            coord,
            runtime,
            customers,
            contracts,
        }
    }

    fn req(id: &str) -> Fields {
        Fields::from([("id".to_string(), Value::Text(id.into()))])
    }

    #[test]
    fn cross_component_call_joins_one_transaction() {
        let w = world();
        w.customers.seed("c1", "Smith").unwrap();
        let ctx = w.coord.begin("Contract").unwrap();
        w.contracts.put(&ctx, "k1", b"policy".to_vec()).unwrap();
        let resp = propagate(&ctx, &w.runtime, ("Customer", "getCustomer"), &req("c1")).unwrap();
        assert_eq!(resp["name"], Value::Text("Smith".into()));
        assert_eq!(ctx.enlisted(), vec!["contracts".to_string(), "customers".to_string()]);
        assert_eq!(w.customers.committed("seen:c1"), None);
        assert_eq!(w.coord.commit(&ctx).unwrap(), Outcome::Committed);
        assert_eq!(w.customers.committed("seen:c1"), Some(b"1".to_vec()));
        assert_eq!(w.contracts.committed("k1"), Some(b"policy".to_vec()));
    }

    #[test]
    fn rollback_discards_callee_writes() {
        let w = world();
        let ctx = w.coord.begin("Contract").unwrap();
        propagate(&ctx, &w.runtime, ("Customer", "getCustomer"), &req("c1")).unwrap();
        w.coord.rollback(&ctx).unwrap();
        assert_eq!(w.customers.committed("seen:c1"), None);
    }

    #[test]
    fn terminal_context_is_rejected() {
        let w = world();
        let ctx = w.coord.begin("Contract").unwrap();
        w.coord.rollback(&ctx).unwrap();
        let err = propagate(&ctx, &w.runtime, ("Customer", "getCustomer"), &req("c1")).unwrap_err();
        assert!(matches!(err, CallError::Txn(TxnError::NotActive(_, TxnStatus::Aborted))));
    }

    #[test]
    fn non_transactional_and_unexported_services_are_rejected() {
        let w = world();
        let ctx = w.coord.begin("Contract").unwrap();
        assert!(matches!(
            propagate(&ctx, &w.runtime, ("Customer", "countCustomers"), &Fields::new()),
            Err(CallError::NotTransactional { .. })
        ));
        assert!(matches!(
            propagate(&ctx, &w.runtime, ("Customer", "purge"), &Fields::new()),
            Err(CallError::Binding(_))
        ));
        assert!(matches!(
            propagate(&ctx, &w.runtime, ("Nowhere", "x"), &Fields::new()),
            Err(CallError::Binding(_))
        ));
        assert!(ctx.enlisted().is_empty());
    }

    #[test]
    fn request_must_match_signature() {
        let w = world();
        let ctx = w.coord.begin("Contract").unwrap();
        assert!(matches!(
            propagate(&ctx, &w.runtime, ("Customer", "getCustomer"), &Fields::new()),
            Err(CallError::BadRequest { .. })
        ));
    }
}
