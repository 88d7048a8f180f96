mod common;

use std::collections::BTreeMap;
use std::path::PathBuf;

use vsoa::evidence::{evidence_verify, EvidenceStore};
use vsoa::sim::scenario::{Injection, NodeSpec, Tamper, Topology};
use vsoa::sim::{is_deterministic, run_scenario, run_scenario_with_store, Scenario, ScenarioError};
use vsoa::wire::ProtocolMessage;

fn inject(tick: u64, node: &str, rule: &str) -> Injection {
    Injection {
        tick,
        node: node.into(),
        pattern: rule.into(),
        vm: "g0".into(),
    }
}

fn scenarios_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

#[test]
fn no_injections_means_no_incidents() {
    let out = run_scenario(&Scenario::new(1, 6, 20)).unwrap();
    let m = &out.metrics;
    assert_eq!((m.admitted, m.denied), (6, 0));
    assert_eq!((m.infections, m.evidence_count, m.replacements), (0, 0, 0));
    assert_eq!(m.first_halt_tick, None);
    assert!(out.store.is_empty());
    assert_eq!(common::events(&out.trace, "vm_halted").count(), 0);
}

#[test]
fn zero_probability_contains_to_the_injected_node() {
    let mut s = Scenario::new(2, 10, 20);
    s.detector_latency = 3;
    s.injections.push(inject(2, "n4", "worm-a"));
    let out = run_scenario(&s).unwrap();
    assert_eq!(out.metrics.propagation_count, 0);
    assert_eq!(out.metrics.incidents.len(), 1);
    let inc = &out.metrics.incidents[0];
    assert_eq!((inc.node_id.as_str(), inc.halt_tick), ("n4", 5));
    assert_eq!(inc.detection_latency(), Some(3));
    assert_eq!(out.metrics.infected_at_first_halt, Some(1));
}

#[test]
fn equal_seeds_give_identical_traces() {
    let mut s = Scenario::new(77, 8, 25);
    s.propagation_probability = 0.5;
    s.detector_latency = 2;
    s.injections.push(inject(1, "n0", "worm-a"));
    let a = run_scenario(&s).unwrap();
    let b = run_scenario(&s).unwrap();
    assert_eq!(a.trace_tsv(), b.trace_tsv());
    assert_eq!(a.metrics.to_kv(), b.metrics.to_kv());
    assert!(is_deterministic(&s, 3).unwrap());

    s.seed = 78;
    let c = run_scenario(&s).unwrap();
    assert_ne!(a.trace_tsv(), c.trace_tsv(), "seed should matter at p=0.5");
}

#[test]
fn halted_guests_stay_quiet() {
    for seed in 0..10 {
        let mut s = Scenario::new(seed, 10, 30);
        s.propagation_probability = 1.0;
        s.detector_latency = seed % 4;
        s.injections.push(inject(1, "n0", "worm-b"));
        let out = run_scenario(&s).unwrap();
        assert_eq!(out.metrics.propagation_count > 0, s.detector_latency > 0);
        let v = common::quiescence_violations(&out.trace);
        assert!(v.is_empty(), "seed {seed}: {:?}", v.first());
    }
}

#[test]
fn ring_bound_holds_for_each_latency() {
    for latency in 0..6 {
        let mut s = Scenario::new(9, 10, 20);
        s.topology = Topology::Ring;
        s.propagation_probability = 1.0;
        s.detector_latency = latency;
        s.injections.push(inject(0, "n0", "worm-a"));
        let out = run_scenario(&s).unwrap();
        let at_halt = out.metrics.infected_at_first_halt.unwrap();
        assert!(at_halt <= latency as usize + 1, "L={latency}: {at_halt}");
        // One hop per tick along the ring, so the bound is tight.
        assert_eq!(at_halt, latency as usize + 1);
    }
}

#[test]
fn on_disk_bundles_verify() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = Scenario::new(4, 4, 20);
    s.propagation_probability = 1.0;
    s.detector_latency = 1;
    s.topology = Topology::Star;
    s.injections.push(inject(1, "n0", "trojan-x"));
    let store = EvidenceStore::open(dir.path()).unwrap();
    let out = run_scenario_with_store(&s, store).unwrap();
    assert!(out.metrics.evidence_count >= 2);
    let reopened = EvidenceStore::open(dir.path()).unwrap();
    assert_eq!(reopened.len(), out.metrics.evidence_count);
    for entry in reopened.index() {
        let report = evidence_verify(dir.path(), &entry.hash).unwrap();
        assert!(report.passed(), "{}", report.to_kv());
    }
}

#[test]
fn tampered_nodes_are_never_granted() {
    let mut s = Scenario::new(6, 6, 5);
    for (node, t) in [
        ("n1", Tamper::Core),
        ("n3", Tamper::ForgedCore),
        ("n5", Tamper::RogueKey),
    ] {
        s.nodes.insert(
            node.into(),
            NodeSpec {
                tamper: Some(t),
                ..NodeSpec::default()
            },
        );
    }
    let out = run_scenario(&s).unwrap();
    assert_eq!(out.metrics.admitted, 3);
    assert_eq!(out.metrics.denied, 3);
    assert_eq!(out.metrics.self_check_failures, 1);
    let granted: Vec<&str> = out
        .transcript
        .iter()
        .filter_map(|e| match &e.envelope.body {
            ProtocolMessage::AccessGrant { node_id, .. } => Some(node_id.as_str()),
            _ => None,
        })
        .collect();
    assert_eq!(granted, ["n0", "n2", "n4"]);
    assert!(common::admission_violations(&out.transcript, &out.publisher_pk).is_empty());
    assert!(
        !out.transcript.iter().any(|e| e.node_id == "n1"),
        "self-check failure sends nothing"
    );
}

#[test]
fn injection_into_a_quarantined_guest_is_skipped() {
    let mut s = Scenario::new(8, 1, 12);
    s.provisioning_delay = 4;
    s.injections.push(inject(2, "n0", "worm-a"));
    s.injections.push(inject(3, "n0", "worm-b"));
    let out = run_scenario(&s).unwrap();
    let skipped: Vec<_> = common::events(&out.trace, "inject_skipped").collect();
    assert_eq!(skipped.len(), 1);
    assert_eq!(skipped[0].tick, 3);
    assert!(skipped[0].detail.contains("not running"), "{}", skipped[0].detail);
    assert_eq!(out.metrics.injections, 1);
}

#[test]
fn scenario_validation_names_the_field() {
    type Mutation = Box<dyn Fn(&mut Scenario)>;
    let cases: Vec<(Mutation, &str)> = vec![
        (Box::new(|s| s.num_nodes = 0), "num_nodes"),
        (Box::new(|s| s.propagation_probability = 1.5), "propagation_probability"),
        (
            Box::new(|s| s.injections.push(inject(1, "n7", "worm-a"))),
            "injections[0].node",
        ),
        (
            Box::new(|s| s.injections.push(inject(1, "n0", "nope"))),
            "injections[0].pattern",
        ),
        (Box::new(|s| s.server_down.push(0)), "server_down"),
        (Box::new(|s| s.anomaly_threshold = Some(9.0)), "anomaly_threshold"),
    ];
    for (mutate, field) in cases {
        let mut s = Scenario::new(1, 2, 10);
        mutate(&mut s);
        match run_scenario(&s) {
            Err(ScenarioError::Invalid { field: f, .. }) => assert_eq!(f, field),
            other => panic!("{field}: {:?}", other.map(|o| o.metrics)),
        }
    }
    assert!(matches!(
        Scenario::from_toml("seed = 1\nnum_nodes = 1\nmax_ticks = 2\nbogus = 3\n"),
        Err(ScenarioError::Parse(_))
    ));
}

#[test]
fn toml_round_trip() {
    let mut s = Scenario::new(3, 3, 9);
    s.topology = Topology::Star;
    s.injections.push(inject(1, "n2", "worm-a"));
    s.server_down = vec![4, 5];
    assert_eq!(Scenario::from_toml(&s.to_toml()).unwrap(), s);
}

#[test]
fn shipped_scenarios_run_and_hold_invariants() {
    let mut seen = BTreeMap::new();
    for entry in std::fs::read_dir(scenarios_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_none_or(|x| x != "toml") {
            continue;
        }
        let s = Scenario::from_toml(&std::fs::read_to_string(&path).unwrap()).unwrap();
        let out = run_scenario(&s).unwrap();
        let name = path.file_stem().unwrap().to_string_lossy().to_string();
        assert!(common::quiescence_violations(&out.trace).is_empty(), "{name}");
        assert!(
            common::admission_violations(&out.transcript, &out.publisher_pk).is_empty(),
            "{name}"
        );
        let profiles = (0..s.num_nodes)
            .map(|i| (Scenario::node_id(i), s.profile_for(&Scenario::node_id(i))))
            .collect();
        assert!(
            common::coverage_violations(&out.transcript, &profiles).is_empty(),
            "{name}"
        );
        seen.insert(name, out.metrics);
    }
    let single = &seen["single-node-infection"];
    assert_eq!(single.first_halt_tick, Some(7));
    assert_eq!(seen["ring-containment"].infected_at_first_halt, Some(4));
    assert_eq!(seen["tampered-nodes"].denied, 3);
    let outage = &seen["server-outage"].incidents[0];
    assert_eq!(outage.halt_tick, 4);
    assert!(outage.replace_tick.unwrap() > 8, "replacement must wait for the server");
    assert!(outage.evidence.is_some());
}
