use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use tra_bench::{fixtures, stores};
use tra_core::broker::{Broker, BrokerTable, Dispatch, EndpointDef, LegacyEndpoint};
use tra_core::component::CallEdge;
use tra_core::harness::{crash_sweep, run_scenario, RunOptions, Scenario};
use tra_core::{load_manifest, validate_layering, Fields, Trace, Value};

fn two_phase_commit(c: &mut Criterion) {
    let mut group = c.benchmark_group("commit");
    for n in [1usize, 2, 4] {
        group.bench_function(format!("{n} stores"), |b| {
            b.iter_batched(
                || stores(n),
                |(coord, stores)| {
                    let t = coord.begin("bench").unwrap();
                    for s in &stores {
                        s.put(&t, "k", "1").unwrap();
                    }
                    black_box(coord.commit(&t).unwrap())
                },
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

fn broker(c: &mut Criterion) {
    let broker = Broker::new(Trace::disabled());
    for name in ["poladm", "billsys"] {
        let text = std::fs::read_to_string(fixtures().join(format!("endpoints/{name}.json"))).unwrap();
        let def: EndpointDef = serde_json::from_str(&text).unwrap();
        broker.add_endpoint(Arc::new(LegacyEndpoint::new(def)), 100).unwrap();
    }
    let table: BrokerTable = std::fs::read_to_string(fixtures().join("tables/customer360.json"))
        .unwrap()
        .parse()
        .unwrap();
    broker.register_table(table).unwrap();
    let request = Fields::from([("customerId".to_string(), Value::text("C001"))]);
    let mut group = c.benchmark_group("broker");
    for (label, dispatch) in [("parallel", Dispatch::Parallel), ("sequential", Dispatch::Sequential)] {
        group.bench_function(label, |b| {
            b.iter(|| black_box(broker.invoke_with(dispatch, "getCustomer360", &request).unwrap()))
        });
    }
    group.finish();
}

fn layering(c: &mut Criterion) {
    let model = load_manifest(&std::fs::read_to_string(fixtures().join("manifest.json")).unwrap()).unwrap();
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fixtures().join("edges.json")).unwrap()).unwrap();
    let edges: Vec<CallEdge> = doc["edges"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| CallEdge::parse(e["caller"].as_str().unwrap(), e["callee"].as_str().unwrap()).unwrap())
        .collect();
    c.bench_function("validate fixture edges", |b| {
        b.iter(|| black_box(validate_layering(&model, &edges).unwrap()))
    });
}

fn harness(c: &mut Criterion) {
    let scenario = Scenario::load(fixtures().join("scenarios/reference.json")).unwrap();
    c.bench_function("run reference", |b| {
        b.iter(|| black_box(run_scenario(&scenario, &RunOptions::default()).unwrap()))
    });
    let transfer = Scenario::load(fixtures().join("scenarios/transfer.json")).unwrap();
    c.bench_function("sweep transfer", |b| b.iter(|| black_box(crash_sweep(&transfer).unwrap())));
}

criterion_group!(benches, two_phase_commit, broker, layering, harness);
criterion_main!(benches);
