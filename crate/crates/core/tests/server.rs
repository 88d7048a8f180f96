mod common;

use std::collections::BTreeSet;

use common::DirectLink;
use vsoa::agent::BootOutcome;
use vsoa::crypto::{append_custody, custody_intact, CustodyAction, Pki};
use vsoa::detect::{detectors_for, Cause, Verdict};
use vsoa::evidence::{EvidenceBundle, EvidenceMeta, StoreError};
use vsoa::fixtures;
use vsoa::model::{CapabilityTag, NodeClass};
use vsoa::server::{ServerConfig, ServerError};
use vsoa::wire::{DenyReason, Envelope, ProtocolMessage, StackAttestation};
use vsoa::{hash_content, Resource};

fn join(
    node: &str,
    identity: &vsoa::crypto::Identity,
    stack: &vsoa::LayerStack,
    profile: vsoa::NodeProfile,
) -> Envelope {
    Envelope {
        sender: format!("node:{node}"),
        seq: 1,
        tick: 0,
        reply_to: None,
        body: ProtocolMessage::JoinRequest {
            node_id: node.into(),
            profile,
            stack_attestation: StackAttestation::measure(stack, identity),
        },
    }
}

fn denial(body: &ProtocolMessage) -> Option<DenyReason> {
    match body {
        ProtocolMessage::AccessDenied { reason, .. } => Some(*reason),
        _ => None,
    }
}

#[test]
fn valid_join_is_provisioned_with_tokens_for_every_resource() {
    let pki = Pki::from_seed(1);
    let mut server = common::server(&pki);
    let stack = fixtures::node_stack("n0", 1, &pki);
    let out = server.handle(&join("n0", &pki.node("n0"), &stack, fixtures::default_profile("n0")), 0);
    let ProtocolMessage::ProvisionVm {
        security_image,
        component_set,
        tokens,
    } = &out.reply.body
    else {
        panic!("expected ProvisionVm, got {:?}", out.reply.body.kind());
    };
    assert_eq!(security_image, server.catalog().security_env_image());
    let ids: Vec<&str> = component_set.iter().map(|c| c.component_id.as_str()).collect();
    assert_eq!(ids, ["av-lite"]);
    let granted: BTreeSet<Resource> = tokens.iter().map(|t| t.resource).collect();
    assert_eq!(granted, BTreeSet::from([Resource::GuestMemory, Resource::GuestDisk]));
    assert_eq!(out.reply.reply_to, Some(1));
    assert!(
        !server.registry().is_admitted("n0", 0),
        "admission waits for attestation"
    );
}

#[test]
fn unknown_key_is_denied_and_registry_untouched() {
    let pki = Pki::from_seed(1);
    let rogue = Pki::from_seed(2);
    let mut server = common::server(&pki);
    let stack = fixtures::node_stack("n0", 1, &pki);
    let out = server.handle(
        &join("n0", &rogue.node("n0"), &stack, fixtures::default_profile("n0")),
        0,
    );
    assert_eq!(denial(&out.reply.body), Some(DenyReason::UnknownKey));
    assert!(server.registry().is_empty());

    // A genuine credential for another node does not work either.
    let out = server.handle(&join("n0", &pki.node("n1"), &stack, fixtures::default_profile("n0")), 0);
    assert_eq!(denial(&out.reply.body), Some(DenyReason::UnknownKey));
}

#[test]
fn core_mutated_after_signing_is_an_integrity_failure() {
    let pki = Pki::from_seed(1);
    let mut server = common::server(&pki);
    let mut stack = fixtures::node_stack("n0", 1, &pki);
    stack.core_image.payload[0] ^= 1;
    let out = server.handle(&join("n0", &pki.node("n0"), &stack, fixtures::default_profile("n0")), 0);
    assert_eq!(denial(&out.reply.body), Some(DenyReason::IntegrityFailure));
    assert!(server.registry().is_empty());
}

#[test]
fn forged_attestation_signature_is_rejected() {
    let pki = Pki::from_seed(1);
    let mut server = common::server(&pki);
    let stack = fixtures::node_stack("n0", 1, &pki);
    let mut env = join("n0", &pki.node("n0"), &stack, fixtures::default_profile("n0"));
    if let ProtocolMessage::JoinRequest { stack_attestation, .. } = &mut env.body {
        stack_attestation.hardware_id.push('x');
    }
    assert_eq!(
        denial(&server.handle(&env, 0).reply.body),
        Some(DenyReason::BadSignature)
    );
}

#[test]
fn profile_problems_are_reported() {
    let pki = Pki::from_seed(1);
    let mut server = common::server(&pki);
    let stack = fixtures::node_stack("n0", 1, &pki);

    let mut empty = fixtures::default_profile("n0");
    empty.required_capabilities.clear();
    let out = server.handle(&join("n0", &pki.node("n0"), &stack, empty), 0);
    assert_eq!(denial(&out.reply.body), Some(DenyReason::InvalidProfile));

    let mut handheld = fixtures::default_profile("n0");
    handheld.node_class = NodeClass::MobileHandheld;
    handheld.cpu_budget = 4;
    handheld.mem_budget = 4;
    let out = server.handle(&join("n0", &pki.node("n0"), &stack, handheld), 0);
    assert_eq!(denial(&out.reply.body), Some(DenyReason::InfeasibleProfile));
    assert!(server.registry().is_empty());
}

#[test]
fn attestation_must_follow_provisioning_and_match_the_image() {
    let pki = Pki::from_seed(1);
    let mut server = common::server(&pki);
    let node = pki.node("n0");
    let report = |hash| Envelope {
        sender: "node:n0".into(),
        seq: 2,
        tick: 0,
        reply_to: None,
        body: ProtocolMessage::AttestationReport {
            node_id: "n0".into(),
            security_vm_hash: hash,
            signature: node.sign(&vsoa::wire::attestation_report_bytes("n0", hash)),
        },
    };
    let good = server.catalog().security_env_image().content_hash;
    assert_eq!(
        denial(&server.handle(&report(good), 0).reply.body),
        Some(DenyReason::NotProvisioned)
    );

    let stack = fixtures::node_stack("n0", 1, &pki);
    server.handle(&join("n0", &node, &stack, fixtures::default_profile("n0")), 0);
    let wrong = hash_content(b"something else");
    assert_eq!(
        denial(&server.handle(&report(wrong), 0).reply.body),
        Some(DenyReason::SecurityVmMismatch)
    );
    assert!(!server.registry().is_admitted("n0", 0));
    assert!(matches!(
        server.handle(&report(good), 0).reply.body,
        ProtocolMessage::AccessGrant { .. }
    ));
    assert!(server.registry().is_admitted("n0", 0));
}

fn admitted_pair(pki: &Pki, config: ServerConfig) -> (vsoa::server::SecurityServer, vsoa::agent::NodeAgent) {
    let mut server = common::server_with(pki, config);
    let mut agent = common::agent(pki, &server, "n0");
    let mut link = DirectLink::new(&mut server, 0);
    assert_eq!(agent.boot_sequence(&mut link, 0).unwrap(), BootOutcome::Admitted);
    (server, agent)
}

fn infected() -> Verdict {
    Verdict::Infected(Cause::Rule("worm-a".into()))
}

#[test]
fn infection_reports_queue_once_and_need_admission() {
    let pki = Pki::from_seed(1);
    let (mut server, _) = admitted_pair(
        &pki,
        ServerConfig {
            lease_ticks: 10,
            ..ServerConfig::default()
        },
    );
    let ack = server.handle_infection_report("n0", "g0", &infected(), 7, 3).unwrap();
    assert_eq!(
        ack,
        ProtocolMessage::Ack {
            ref_id: "report:7".into()
        }
    );
    assert_eq!(server.analysis_queue().len(), 1);
    server.handle_infection_report("n0", "g0", &infected(), 8, 3).unwrap();
    assert_eq!(
        server.analysis_queue().len(),
        1,
        "duplicate (node, vm, tick) must not queue twice"
    );
    server.handle_infection_report("n0", "g0", &infected(), 9, 4).unwrap();
    assert_eq!(server.analysis_queue().len(), 2);
    assert!(matches!(
        server.handle_infection_report("n0", "g0", &infected(), 10, 10),
        Err(ServerError::UnadmittedNode(_))
    ));
    assert!(matches!(
        server.handle_infection_report("ghost", "g0", &infected(), 11, 1),
        Err(ServerError::UnadmittedNode(_))
    ));
}

fn bundle(pki: &Pki, actions: &[CustodyAction]) -> EvidenceBundle {
    let snapshot = b"infected guest image \xde\xad\xbe\xefWORM-A".to_vec();
    let mut b = EvidenceBundle::new(
        snapshot.clone(),
        EvidenceMeta {
            node_id: "n0".into(),
            vm_id: "g0".into(),
            halt_tick: 7,
            verdict: infected(),
            app_manifest: fixtures::manifest_for(0),
            snapshot_hash: hash_content(&snapshot),
        },
    );
    let node = pki.node("n0");
    let addr = b.address();
    for (i, a) in actions.iter().enumerate() {
        append_custody(&mut b.custody, addr, &node, *a, 7 + i as u64);
    }
    b
}

#[test]
fn stored_bundle_lives_at_its_content_address() {
    let pki = Pki::from_seed(1);
    let (mut server, _) = admitted_pair(&pki, ServerConfig::default());
    let b = bundle(&pki, &[CustodyAction::Snapshotted, CustodyAction::Transferred]);
    let addr = server.store_evidence(&b, 8).unwrap();
    assert_eq!(addr, hash_content(&b.content_bytes()));
    let stored = server.store().get(&addr).unwrap();
    assert_eq!(stored.snapshot, b.snapshot);
    let actions: Vec<_> = stored.custody.iter().map(|r| r.action).collect();
    assert_eq!(
        actions,
        [
            CustodyAction::Snapshotted,
            CustodyAction::Transferred,
            CustodyAction::Stored
        ]
    );
    assert_eq!(stored.custody[2].actor.owner, vsoa::KeyOwner::Server);
    assert!(custody_intact(addr, &stored.custody, pki.publisher_pk()));

    assert!(matches!(server.store_evidence(&b, 9), Err(StoreError::DuplicateBundle(a)) if a == addr));
    assert_eq!(server.store().len(), 1);
}

#[test]
fn middle_record_resigned_by_wrong_key_is_custody_broken() {
    let pki = Pki::from_seed(1);
    let (mut server, _) = admitted_pair(&pki, ServerConfig::default());
    let mut b = bundle(
        &pki,
        &[
            CustodyAction::Snapshotted,
            CustodyAction::Transferred,
            CustodyAction::Transferred,
        ],
    );
    let rogue = Pki::from_seed(99).node("n0");
    let forged = rogue.sign(b"anything");
    b.custody[1].signature = forged;
    assert!(matches!(
        server.store_evidence(&b, 8),
        Err(StoreError::CustodyBroken(1))
    ));
    assert!(server.store().is_empty());

    let b = bundle(&pki, &[]);
    assert!(matches!(
        server.store_evidence(&b, 8),
        Err(StoreError::CustodyBroken(0))
    ));
}

#[test]
fn clean_vm_matches_requested_manifest() {
    let pki = Pki::from_seed(1);
    let (server, _) = admitted_pair(&pki, ServerConfig::default());
    for i in 0..3 {
        let manifest = fixtures::manifest_for(i);
        let img = server.issue_clean_vm("n0", &manifest, 1).unwrap();
        assert_eq!(img.app_manifest, manifest);
        assert!(vsoa::crypto::check_integrity(&img, pki.publisher_pk()));
        assert!(server.catalog().clean_hashes().contains(&img.content_hash));
    }
    assert!(matches!(
        server.issue_clean_vm("n0", &["solitaire".to_string()], 1),
        Err(ServerError::UnknownManifest(_))
    ));
    assert!(matches!(
        server.issue_clean_vm("n9", &fixtures::manifest_for(0), 1),
        Err(ServerError::UnadmittedNode(_))
    ));
}

#[test]
fn component_update_carries_tokens_and_lands_on_ack() {
    let pki = Pki::from_seed(1);
    let (mut server, mut agent) = admitted_pair(&pki, ServerConfig::default());
    let set = vec![
        "av-lite".to_string(),
        "fw-filter".to_string(),
        "ids-entropy".to_string(),
    ];
    let push = server.push_component_update("n0", &set, 2).unwrap();
    let ProtocolMessage::ComponentUpdate {
        component_set, tokens, ..
    } = &push.body
    else {
        panic!()
    };
    for c in component_set {
        let expected: BTreeSet<Resource> = c
            .capabilities
            .iter()
            .flat_map(|cap| detectors_for(cap).iter().map(|(_, r)| *r))
            .collect();
        let got: BTreeSet<Resource> = tokens
            .iter()
            .filter(|t| t.component_id == c.component_id)
            .map(|t| t.resource)
            .collect();
        assert_eq!(got, expected, "{}", c.component_id);
    }
    assert_eq!(server.registry().get("n0").unwrap().component_set, ["av-lite"]);

    let mut link = DirectLink::new(&mut server, 3);
    agent.handle_push(&mut link, &push, 3).unwrap();
    assert_eq!(server.registry().get("n0").unwrap().component_set, set);
    assert_eq!(agent.component_ids(), set);

    assert!(matches!(
        server.push_component_update("n5", &set, 3),
        Err(ServerError::UnadmittedNode(_))
    ));
    assert!(matches!(
        server.push_component_update("n0", &["fw-filter".to_string()], 3),
        Err(ServerError::UpdateViolatesProfile(_))
    ));
    let _ = CapabilityTag::SIGNATURE_SCAN;
}

#[test]
fn renewal_extends_the_lease_and_refreshes_tokens() {
    let pki = Pki::from_seed(1);
    let config = ServerConfig {
        lease_ticks: 8,
        token_ttl: 8,
        ..ServerConfig::default()
    };
    let (mut server, mut agent) = admitted_pair(&pki, config);
    for tick in 1..30 {
        let mut link = DirectLink::new(&mut server, tick);
        agent.maintain(&mut link, tick);
        let pushes = std::mem::take(&mut link.pushes);
        for p in pushes {
            agent.handle_push(&mut link, &p, tick).unwrap();
        }
        assert!(agent.is_admitted(tick), "lost admission at {tick}");
        assert!(server.registry().is_admitted("n0", tick));
        let mut link = DirectLink::new(&mut server, tick);
        let records = agent.guard_cycle(&mut link, tick);
        assert_eq!(records.len(), 2, "tokens lapsed at {tick}");
    }
}

#[test]
fn deep_analysis_rescans_and_countersigns() {
    let pki = Pki::from_seed(1);
    let (mut server, _) = admitted_pair(&pki, ServerConfig::default());
    server.handle_infection_report("n0", "g0", &infected(), 1, 7).unwrap();
    let b = bundle(&pki, &[CustodyAction::Snapshotted, CustodyAction::Transferred]);
    let addr = server.store_evidence(&b, 8).unwrap();
    assert_eq!(server.analysis_queue().len(), 1);
    let results = server.run_deep_analysis(9).unwrap();
    assert_eq!(results.len(), 1);
    assert_eq!(results[0].verdicts[0].1, infected());
    assert!(server.analysis_queue().is_empty());
    let stored = server.store().get(&addr).unwrap();
    assert_eq!(stored.custody.last().unwrap().action, CustodyAction::Analyzed);
    assert!(custody_intact(addr, &stored.custody, pki.publisher_pk()));
}
