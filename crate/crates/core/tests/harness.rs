use std::collections::BTreeMap;
use std::path::PathBuf;

use tra_core::harness::{combinations, crash_sweep, expand, run_scenario, RunError, RunOptions, Scenario};
use tra_core::{FaultSpec, TxnStatus};

const SCENARIOS: [&str; 6] = ["transfer", "reference", "cross_component", "broker", "process", "concurrent"];

fn fixture(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(format!("../../fixtures/scenarios/{name}.json"));
    Scenario::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn run_with(name: &str, faults: &[&str]) -> tra_core::harness::RunReport {
    let options = RunOptions {
        faults: faults.iter().map(|f| f.parse::<FaultSpec>().unwrap()).collect(),
        ..RunOptions::default()
    };
    run_scenario(&fixture(name), &options).unwrap()
}

#[test]
fn every_bundled_scenario_passes() {
    for name in SCENARIOS {
        let report = run_scenario(&fixture(name), &RunOptions::default()).unwrap();
        assert!(report.passed, "{name}:\n{report}");
        assert!(report.errors.iter().all(|e| e.expected), "{name}");
    }
}

#[test]
fn every_bundled_scenario_survives_its_sweep() {
    let mut sizes = BTreeMap::new();
    for name in SCENARIOS {
        let scenario = fixture(name);
        let sweep = crash_sweep(&scenario).unwrap();
        assert!(sweep.passed(), "{sweep}");
        sizes.insert(name, sweep.runs.len());
    }
    assert_eq!(sizes["transfer"], 15);
    assert_eq!(sizes["reference"], 20);
}

#[test]
fn same_seed_same_report() {
    for name in SCENARIOS {
        let a = run_scenario(&fixture(name), &RunOptions::default()).unwrap().to_json();
        let b = run_scenario(&fixture(name), &RunOptions::default()).unwrap().to_json();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn seed_changes_the_interleaving() {
    let scenario = fixture("concurrent");
    let logs: std::collections::BTreeSet<Vec<String>> = (0..20)
        .map(|seed| {
            let options = RunOptions {
                seed: Some(seed),
                ..RunOptions::default()
            };
            run_scenario(&scenario, &options).unwrap().coordinator_log
        })
        .collect();
    assert!(logs.len() > 1);
}

#[test]
fn coordinator_crash_before_the_decision_aborts() {
    let report = run_with("transfer", &["coordinator@after_vote_before_decision"]);
    assert_eq!(report.fired_faults.len(), 1);
    assert!(!report.coordinator_log.iter().any(|l| l.starts_with("COMMIT")));
    assert_eq!(report.value("store-A", "acct-1"), Some("100"));
    assert_eq!(report.value("store-B", "acct-2"), Some("50"));
    assert_eq!(report.txn("t1").unwrap().status, Some(TxnStatus::Aborted));
}

#[test]
fn coordinator_crash_after_the_decision_commits() {
    let report = run_with("transfer", &["coordinator@after_commit_record_before_phase2"]);
    assert_eq!(report.value("store-A", "acct-1"), Some("70"));
    assert_eq!(report.value("store-B", "acct-2"), Some("80"));
    assert_eq!(report.txn("t1").unwrap().status, Some(TxnStatus::Committed));
    assert!(report.passed, "{report}");
}

#[test]
fn two_faults_fire_once_each() {
    let report = run_with(
        "transfer",
        &["store-B@mid_phase2_one_committed", "coordinator@after_phase2_before_end"],
    );
    assert_eq!(report.fired_faults.len(), 2, "{report}");
    assert_eq!(report.value("store-B", "acct-2"), Some("80"));
}

#[test]
fn unknown_fault_target_is_refused() {
    let options = RunOptions {
        faults: vec!["nowhere@before_prepare".parse().unwrap()],
        ..RunOptions::default()
    };
    assert!(matches!(
        run_scenario(&fixture("transfer"), &options),
        Err(RunError::UnknownFaultTarget(_))
    ));
}

#[test]
fn combinations_cover_every_target_and_point() {
    let faults = combinations(&fixture("reference"));
    let shown: Vec<String> = faults.iter().map(ToString::to_string).collect();
    assert_eq!(shown.len(), 20);
    assert_eq!(shown[0], "coordinator@before_prepare");
    let unique: std::collections::BTreeSet<_> = shown.iter().collect();
    assert_eq!(unique.len(), 20);
}

#[test]
fn templates_expand() {
    let vars: BTreeMap<String, String> = [("id".to_string(), "C1".to_string())].into();
    assert_eq!(expand("cust-{id}", &vars).unwrap(), "cust-C1");
    assert_eq!(expand("plain", &vars).unwrap(), "plain");
    assert!(expand("{missing}", &vars).is_err());
    assert!(expand("{id", &vars).is_err());
}

#[test]
fn malformed_scenarios_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        r#"{"name":"x","actions":[{"op":"put","txn":"t","store":"nope","key":"k","value":"v"}]}"#,
        r#"{"name":"x","stores":[{"name":"coordinator"}],"actions":[]}"#,
        r#"{"name":"x","actions":[{"op":"teleport"}]}"#,
        r#"{"name":"x","stores":[{"name":"a"}],"queues":[{"name":"a"}],"actions":[]}"#,
    ];
    for (i, body) in cases.iter().enumerate() {
        let path = dir.path().join(format!("{i}.json"));
        std::fs::write(&path, body).unwrap();
        assert!(Scenario::load(&path).is_err(), "case {i} accepted");
    }
}
