//! Shared setup for the benches.

use std::path::PathBuf;
use std::sync::Arc;

use tra_core::{Coordinator, DurableLog, ManagedStore, Trace};

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

/// A coordinator over `n` in-memory stores, each seeded with key `k`.
pub fn stores(n: usize) -> (Coordinator, Vec<Arc<ManagedStore>>) {
    let trace = Trace::disabled();
    let coord = Coordinator::new(DurableLog::in_memory(), trace.clone()).expect("in-memory log");
    let stores: Vec<_> = (0..n)
        .map(|i| {
            let s = Arc::new(ManagedStore::in_memory(format!("s{i}"), trace.clone()));
            s.seed("k", "0").expect("seed");
            coord.register(s.clone()).expect("register");
            s
        })
        .collect();
    (coord, stores)
}
