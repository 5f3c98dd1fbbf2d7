use std::collections::BTreeSet;

use proptest::prelude::*;
use serde_json::json;

use tra_core::broker::{FieldSpec, MessageSpec};
use tra_core::component::CallEdge;
use tra_core::value::{Decimal, FieldKind};
use tra_core::{load_manifest, validate_layering, ComponentModel, Fields, LayerKind, ResourceManager, TxnId, TxnStatus, Value};

const LAYERS: [&str; 5] = ["end_client", "business_process", "business_service", "sbrs", "sbr"];

#[derive(Debug, Clone)]
struct Node {
    component: usize,
    layer: usize,
    services: Vec<String>,
}

#[derive(Debug, Clone)]
struct RandomModel {
    nodes: Vec<Node>,
    exports: BTreeSet<(usize, String)>,
}

impl RandomModel {
    fn internal_name(&self, i: usize) -> String {
        format!("L{}n{i}", self.nodes[i].layer)
    }

    fn manifest(&self, components: usize) -> String {
        let comps: Vec<_> = (0..components)
            .map(|c| {
                let internals: Vec<_> = (0..self.nodes.len())
                    .filter(|&i| self.nodes[i].component == c)
                    .map(|i| {
                        let provides: Vec<_> = self.nodes[i].services.iter().map(|s| json!({"name": s})).collect();
                        json!({"name": self.internal_name(i), "layer": LAYERS[self.nodes[i].layer], "provides": provides})
                    })
                    .collect();
                let exports: Vec<_> = self
                    .exports
                    .iter()
                    .filter(|(i, _)| self.nodes[*i].component == c)
                    .map(|(i, s)| format!("{}.{s}", self.internal_name(*i)))
                    .collect();
                json!({"name": format!("C{c}"), "internals": internals, "exports": exports})
            })
            .collect();
        json!({ "components": comps }).to_string()
    }
}

fn random_model() -> impl Strategy<Value = (usize, RandomModel)> {
    (1usize..=3)
        .prop_flat_map(|components| {
            let node = (0..components, 0usize..5);
            (Just(components), prop::collection::vec(node, 1..10), any::<u64>())
        })
        .prop_map(|(components, raw, mask)| {
            let nodes: Vec<Node> = raw
                .into_iter()
                .map(|(component, layer)| Node {
                    component,
                    layer,
                    services: if (1..=3).contains(&layer) {
                        vec!["s0".into(), "s1".into()]
                    } else {
                        vec![]
                    },
                })
                .collect();
            let mut exports = BTreeSet::new();
            // export names are unique within a component
            let mut taken = BTreeSet::new();
            for (i, n) in nodes.iter().enumerate() {
                if n.layer == 2 || n.layer == 3 {
                    for (k, s) in n.services.iter().enumerate() {
                        if mask >> ((i * 2 + k) % 64) & 1 == 1 && taken.insert((n.component, s.clone())) {
                            exports.insert((i, s.clone()));
                        }
                    }
                }
            }
            (components, RandomModel { nodes, exports })
        })
}

/// The decided matrix, written out independently of the validator.
/// Layers are indexed from the top: 0 end client .. 4 shared resource.
fn permitted(caller: usize, callee: usize, same_component: bool, exported: bool) -> bool {
    if same_component {
        matches!((caller, callee), (0, 1) | (0, 2) | (1, 1) | (1, 2) | (2, 2) | (2, 3) | (3, 4))
    } else {
        matches!(caller, 1 | 2) && matches!(callee, 2 | 3) && exported
    }
}

fn all_edges(m: &RandomModel) -> Vec<(CallEdge, bool)> {
    let mut out = Vec::new();
    for (a, caller) in m.nodes.iter().enumerate() {
        let from = (format!("C{}", caller.component), m.internal_name(a));
        out.push((
            CallEdge::adapter((&from.0, &from.1), "LEGACY"),
            caller.layer == 3,
        ));
        for (b, callee) in m.nodes.iter().enumerate() {
            if a == b {
                continue;
            }
            let to_c = format!("C{}", callee.component);
            let to_i = m.internal_name(b);
            let same = caller.component == callee.component;
            let targets: Vec<String> = if callee.layer == 4 {
                vec![String::new()]
            } else {
                callee.services.clone()
            };
            for s in targets {
                let exported = m.exports.contains(&(b, s.clone()));
                out.push((
                    CallEdge::service((&from.0, &from.1), (&to_c, &to_i, &s)),
                    permitted(caller.layer, callee.layer, same, exported),
                ));
            }
        }
    }
    out
}

proptest! {
    #[test]
    fn validator_flags_exactly_the_edges_outside_the_matrix((components, m) in random_model()) {
        let model = load_manifest(&m.manifest(components)).unwrap();
        let edges = all_edges(&m);
        let calls: Vec<CallEdge> = edges.iter().map(|(e, _)| e.clone()).collect();
        let report = validate_layering(&model, &calls).unwrap();
        let flagged: BTreeSet<usize> = report.violations.iter().map(|v| v.index).collect();
        let expected: BTreeSet<usize> = edges.iter().enumerate().filter(|(_, (_, ok))| !ok).map(|(i, _)| i).collect();
        prop_assert_eq!(flagged, expected);
        prop_assert_eq!(validate_layering(&model, &calls).unwrap(), report);
    }

    #[test]
    fn permitted_edges_alone_conform((components, m) in random_model()) {
        let model = load_manifest(&m.manifest(components)).unwrap();
        let calls: Vec<CallEdge> = all_edges(&m).into_iter().filter(|(_, ok)| *ok).map(|(e, _)| e).collect();
        prop_assert!(validate_layering(&model, &calls).unwrap().is_empty());
    }

    #[test]
    fn no_upward_edge_is_ever_accepted((components, m) in random_model()) {
        let model = load_manifest(&m.manifest(components)).unwrap();
        for (edge, _) in all_edges(&m) {
            let caller = model.internal(&edge.caller_component, &edge.caller_internal).unwrap().layer;
            if let tra_core::component::Callee::Service { component, internal, .. } = &edge.callee {
                let callee = model.internal(component, internal).unwrap().layer;
                if callee > caller {
                    prop_assert_eq!(validate_layering(&model, &[edge]).unwrap().len(), 1);
                }
            }
        }
    }
}

fn field_values(spec: &MessageSpec) -> impl Strategy<Value = Fields> {
    let per_field: Vec<BoxedStrategy<(String, Value)>> = spec
        .fields()
        .iter()
        .map(|f| {
            let name = f.name.clone();
            let len = f.length;
            match f.kind {
                FieldKind::Text => prop::string::string_regex(&format!("[A-Z0-9]([A-Z0-9 ]{{0,{}}}[A-Z0-9])?", len.saturating_sub(2)))
                    .unwrap()
                    .prop_filter("fits", move |s| s.len() <= len)
                    .prop_map(move |s| (name.clone(), Value::Text(s)))
                    .boxed(),
                FieldKind::Integer => {
                    let max = 10i64.pow((len - 1).min(17) as u32) - 1;
                    (-max..=max).prop_map(move |i| (name.clone(), Value::Integer(i))).boxed()
                }
                FieldKind::Decimal => {
                    let scale = f.scale();
                    let max = 10i64.pow((len - 1).min(17) as u32) - 1;
                    (-max..=max)
                        .prop_map(move |u| (name.clone(), Value::Decimal(Decimal::new(u, scale))))
                        .boxed()
                }
            }
        })
        .collect();
    per_field.prop_map(|pairs| pairs.into_iter().collect())
}

fn message_spec() -> impl Strategy<Value = MessageSpec> {
    prop::collection::vec((0usize..3, 1usize..12, 0usize..3, 0u32..4), 1..6).prop_map(|raw| {
        let mut offset = 0;
        let mut fields = Vec::new();
        for (i, (kind, length, gap, scale)) in raw.into_iter().enumerate() {
            offset += gap;
            let kind = [FieldKind::Text, FieldKind::Integer, FieldKind::Decimal][kind];
            let mut f = FieldSpec::new(format!("f{i}"), offset, length.max(2), kind);
            if kind == FieldKind::Decimal {
                f = f.with_scale(scale);
            }
            offset += f.length;
            fields.push(f);
        }
        MessageSpec::new(offset, fields).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn records_round_trip((spec, fields) in message_spec().prop_flat_map(|s| (Just(s.clone()), field_values(&s)))) {
        let record = spec.encode(&fields).unwrap();
        prop_assert_eq!(record.len(), spec.length());
        let back = spec.decode(&record).unwrap();
        for (name, value) in &fields {
            let kind = spec.field(name).unwrap().kind;
            prop_assert_eq!(back[name].coerce(kind).unwrap().to_string(), value.to_string());
        }
    }

    #[test]
    fn decode_never_panics(spec in message_spec(), junk in "[ -~]{0,40}") {
        let _ = spec.decode(&junk);
    }
}

#[test]
fn empty_model_has_no_edges_to_check() {
    let report = validate_layering(&ComponentModel::default(), &[]).unwrap();
    assert!(report.is_empty());
    assert!(LayerKind::EndClient > LayerKind::SharedBusinessResource);
}

#[derive(Debug, Clone)]
enum QueueOp {
    Send(u8),
    Receive,
}

fn queue_txn() -> impl Strategy<Value = (Vec<QueueOp>, bool)> {
    let op = prop_oneof![any::<u8>().prop_map(QueueOp::Send), Just(QueueOp::Receive)];
    (prop::collection::vec(op, 0..6), any::<bool>())
}

proptest! {
    #[test]
    fn queue_matches_a_fifo_model(initial in prop::collection::vec(any::<u8>(), 0..5), txns in prop::collection::vec(queue_txn(), 1..8)) {
        let trace = tra_core::Trace::new();
        let coord = tra_core::Coordinator::new(tra_core::DurableLog::in_memory(), trace.clone()).unwrap();
        let queue = std::sync::Arc::new(tra_core::TxnQueue::in_memory("q", trace));
        coord.register(queue.clone()).unwrap();
        let mut model: std::collections::VecDeque<u8> = initial.iter().copied().collect();
        for m in &initial {
            queue.seed(vec![*m]);
        }
        for (ops, commit) in txns {
            let t = coord.begin("P").unwrap();
            let mut taken = 0;
            let mut sent = Vec::new();
            for op in ops {
                match op {
                    QueueOp::Send(m) => {
                        queue.send(&t, vec![m]).unwrap();
                        sent.push(m);
                    }
                    QueueOp::Receive => {
                        let got = queue.receive(&t).unwrap();
                        // staged sends are invisible to their own transaction
                        prop_assert_eq!(got, model.get(taken).map(|m| vec![*m]));
                        if taken < model.len() {
                            taken += 1;
                        }
                    }
                }
            }
            if commit {
                prop_assert_eq!(coord.commit(&t).unwrap(), tra_core::txn::Outcome::Committed);
                model.drain(..taken);
                model.extend(sent);
            } else {
                coord.rollback(&t).unwrap();
            }
            let held: Vec<Vec<u8>> = model.iter().map(|m| vec![*m]).collect();
            prop_assert_eq!(queue.messages(), held);
        }
    }
}

const STATUSES: [TxnStatus; 6] = [
    TxnStatus::Active,
    TxnStatus::Preparing,
    TxnStatus::Committing,
    TxnStatus::Committed,
    TxnStatus::Aborting,
    TxnStatus::Aborted,
];

fn reachable(from: TxnStatus, to: TxnStatus) -> bool {
    let mut seen = vec![from];
    let mut i = 0;
    while i < seen.len() {
        for next in STATUSES {
            if seen[i].can_become(next) && !seen.contains(&next) {
                seen.push(next);
            }
        }
        i += 1;
    }
    seen.contains(&to)
}

#[test]
fn status_machine_shape() {
    for s in STATUSES {
        let out: Vec<_> = STATUSES.iter().filter(|n| s.can_become(**n)).collect();
        assert_eq!(out.is_empty(), s.is_terminal(), "{s}");
        assert!(!s.can_become(s));
        if !s.is_terminal() {
            assert!(reachable(s, TxnStatus::Aborted) || reachable(s, TxnStatus::Committed));
        }
    }
    assert!(!reachable(TxnStatus::Committing, TxnStatus::Aborted));
    assert!(!reachable(TxnStatus::Aborting, TxnStatus::Committed));
}

#[derive(Debug, Clone)]
enum Step {
    Begin,
    Write(usize, usize),
    Commit(usize),
    Rollback(usize),
}

fn step() -> impl Strategy<Value = Step> {
    prop_oneof![
        Just(Step::Begin),
        (0usize..4, 0usize..2).prop_map(|(t, s)| Step::Write(t, s)),
        (0usize..4).prop_map(Step::Commit),
        (0usize..4).prop_map(Step::Rollback),
    ]
}

proptest! {
    #[test]
    fn observed_statuses_follow_the_machine(
        steps in prop::collection::vec(step(), 1..20),
        fault in prop::option::of((0usize..3, 0usize..5)),
    ) {
        let trace = tra_core::Trace::new();
        let coord = tra_core::Coordinator::new(tra_core::DurableLog::in_memory(), trace.clone()).unwrap();
        let stores: Vec<_> = ["a", "b"]
            .iter()
            .map(|id| std::sync::Arc::new(tra_core::ManagedStore::in_memory(*id, trace.clone())))
            .collect();
        for s in &stores {
            coord.register(s.clone()).unwrap();
        }
        if let Some((target, point)) = fault {
            let target = match target {
                0 => tra_core::txn::FaultTarget::Coordinator,
                t => tra_core::txn::FaultTarget::Rm(["a", "b"][t - 1].into()),
            };
            coord.arm_fault(tra_core::FaultSpec::new(target, tra_core::CrashPoint::ALL[point]));
        }
        let mut txns = Vec::new();
        let mut last: std::collections::BTreeMap<TxnId, TxnStatus> = Default::default();
        let mut observe = |coord: &tra_core::Coordinator| -> Result<(), TestCaseError> {
            if !coord.is_up() {
                return Ok(());
            }
            for t in coord.transactions() {
                let Some(now) = coord.status(t.id) else { continue };
                if let Some(before) = last.insert(t.id, now) {
                    prop_assert!(before == now || reachable(before, now), "#{} went {before} -> {now}", t.id);
                }
            }
            Ok(())
        };
        for s in steps {
            match s {
                Step::Begin => {
                    if let Ok(t) = coord.begin("P") {
                        txns.push(t);
                    }
                }
                Step::Write(t, s) => {
                    if let Some(t) = txns.get(t) {
                        let _ = stores[s].put(t, "k", "v");
                    }
                }
                Step::Commit(t) => {
                    if let Some(t) = txns.get(t) {
                        let _ = coord.commit(t);
                    }
                }
                Step::Rollback(t) => {
                    if let Some(t) = txns.get(t) {
                        let _ = coord.rollback(t);
                    }
                }
            }
            observe(&coord)?;
        }
        for s in &stores {
            if !s.is_available() {
                s.recover().unwrap();
            }
        }
        if !coord.is_up() || fault.is_some() {
            coord.recover().unwrap();
        }
        observe(&coord)?;
    }
}
