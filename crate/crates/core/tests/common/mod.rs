//! Independent oracles and trace checks shared by the integration tests.
//! Nothing here calls the code paths it is used to check.
#![allow(dead_code)]

pub mod fuzz;

use std::collections::{BTreeMap, BTreeSet};

use vsoa::crypto::{verifies, KeyOwner, PublicKey};
use vsoa::journal::TraceEvent;
use vsoa::model::{NodeProfile, SecurityComponentDescriptor, VmEvent, VmState};
use vsoa::sim::{Direction, TranscriptEntry};
use vsoa::wire::{attestation_report_valid, ProtocolMessage};

/// The five legal moves, written out by hand.
pub fn expected_transition(state: VmState, event: VmEvent) -> Option<VmState> {
    use VmEvent::*;
    use VmState::*;
    let table = [
        (Provisioned, Start, Running),
        (Running, InfectionDetected, Halted),
        (Halted, SnapshotTaken, Quarantined),
        (Quarantined, Replace, Retired),
        (Running, Replace, Retired),
    ];
    table
        .iter()
        .find(|(s, e, _)| *s == state && *e == event)
        .map(|(_, _, n)| *n)
}

/// Every contiguous window compared byte by byte.
pub fn naive_contains(haystack: &[u8], needle: &[u8]) -> bool {
    if needle.is_empty() {
        return true;
    }
    if needle.len() > haystack.len() {
        return false;
    }
    (0..=haystack.len() - needle.len()).any(|i| (0..needle.len()).all(|j| haystack[i + j] == needle[j]))
}

/// First rule id (in order) whose pattern occurs in `data`.
pub fn naive_scan<'a>(data: &[u8], rules: &'a [(String, Vec<u8>)]) -> Option<&'a str> {
    rules
        .iter()
        .find(|(_, p)| naive_contains(data, p))
        .map(|(id, _)| id.as_str())
}

/// Direct restatement of the coverage and budget postconditions.
pub fn covers(profile: &NodeProfile, set: &[SecurityComponentDescriptor]) -> bool {
    let caps: BTreeSet<_> = set.iter().flat_map(|c| c.capabilities.iter().cloned()).collect();
    let cpu: u64 = set.iter().map(|c| c.cpu_cost).sum();
    let mem: u64 = set.iter().map(|c| c.mem_cost).sum();
    profile.required_capabilities.is_subset(&caps) && cpu <= profile.cpu_budget && mem <= profile.mem_budget
}

/// Minimum total cost over all 2^n subsets; ties go to the
/// lexicographically smallest sorted id list. `None` when nothing fits.
pub fn brute_force_select(profile: &NodeProfile, catalog: &[SecurityComponentDescriptor]) -> Option<Vec<String>> {
    assert!(catalog.len() <= 16, "brute force is exponential");
    let mut best: Option<(u64, Vec<String>)> = None;
    for mask in 0u32..(1 << catalog.len()) {
        let set: Vec<SecurityComponentDescriptor> = catalog
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, c)| c.clone())
            .collect();
        if !covers(profile, &set) {
            continue;
        }
        let cost: u64 = set.iter().map(|c| c.cpu_cost + c.mem_cost).sum();
        let mut ids: Vec<String> = set.into_iter().map(|c| c.component_id).collect();
        ids.sort();
        let better = match &best {
            None => true,
            Some((bc, bids)) => cost < *bc || (cost == *bc && ids < *bids),
        };
        if better {
            best = Some((cost, ids));
        }
    }
    best.map(|(_, ids)| ids)
}

/// Shannon entropy in bits per byte, straight from the definition.
pub fn entropy_oracle(data: &[u8]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let mut counts = BTreeMap::new();
    for b in data {
        *counts.entry(*b).or_insert(0usize) += 1;
    }
    let n = data.len() as f64;
    -counts
        .values()
        .map(|c| {
            let p = *c as f64 / n;
            p * p.log2()
        })
        .sum::<f64>()
}

pub fn events<'a>(trace: &'a [TraceEvent], kind: &'a str) -> impl Iterator<Item = &'a TraceEvent> + 'a {
    trace.iter().filter(move |e| e.kind == kind)
}

/// (node, vm) -> halt tick, from `vm_halted` events.
pub fn halts(trace: &[TraceEvent]) -> BTreeMap<(String, String), u64> {
    events(trace, "vm_halted")
        .map(|e| ((e.actor.clone(), e.field("vm").unwrap().to_string()), e.tick))
        .collect()
}

/// Events that show activity of a guest after its halt: observations,
/// propagation it sourced, payload mutations.
pub fn quiescence_violations(trace: &[TraceEvent]) -> Vec<TraceEvent> {
    let halted = halts(trace);
    let after = |node: &str, vm: &str, tick: u64| {
        halted
            .get(&(node.to_string(), vm.to_string()))
            .is_some_and(|h| tick > *h)
    };
    trace
        .iter()
        .filter(|e| match e.kind.as_str() {
            "observe" | "payload_mutated" => after(&e.actor, e.field("vm").unwrap(), e.tick),
            "propagate" => after(e.field("src_node").unwrap(), e.field("src_vm").unwrap(), e.tick),
            _ => false,
        })
        .cloned()
        .collect()
}

/// Re-checks admission from the raw transcript: each AccessGrant must be
/// preceded by a JoinRequest from the same node whose attestation verifies
/// under the publisher key, and by an AttestationReport naming the
/// security image that node was provisioned with.
pub fn admission_violations(transcript: &[TranscriptEntry], publisher_pk: &PublicKey) -> Vec<String> {
    let mut joined_ok: BTreeMap<String, bool> = BTreeMap::new();
    let mut node_keys: BTreeMap<String, PublicKey> = BTreeMap::new();
    let mut provisioned: BTreeMap<String, vsoa::Digest> = BTreeMap::new();
    let mut reported: BTreeMap<String, bool> = BTreeMap::new();
    let mut bad = Vec::new();
    for entry in transcript {
        let node = &entry.node_id;
        match (&entry.direction, &entry.envelope.body) {
            (
                Direction::ToServer,
                ProtocolMessage::JoinRequest {
                    node_id,
                    stack_attestation: a,
                    ..
                },
            ) => {
                let body = a.clone();
                let key_ok = a.node.owner == KeyOwner::Node(node_id.clone()) && a.node.verify(publisher_pk);
                let sig_ok = body.signature_valid();
                let core_ok = verifies(publisher_pk, a.core_hash.as_bytes(), &a.core_signature);
                joined_ok.insert(node.clone(), key_ok && sig_ok && core_ok);
                node_keys.insert(node.clone(), a.node.public_key.clone());
            }
            (Direction::ToNode, ProtocolMessage::ProvisionVm { security_image, .. }) => {
                provisioned.insert(node.clone(), security_image.content_hash);
            }
            (Direction::ToNode, ProtocolMessage::ComponentUpdate { security_image, .. }) => {
                provisioned.insert(node.clone(), security_image.content_hash);
            }
            (
                Direction::ToServer,
                ProtocolMessage::AttestationReport {
                    node_id,
                    security_vm_hash,
                    signature,
                },
            ) => {
                let ok = node_keys
                    .get(node)
                    .is_some_and(|pk| attestation_report_valid(pk, node_id, *security_vm_hash, signature))
                    && provisioned.get(node) == Some(security_vm_hash);
                reported.insert(node.clone(), ok);
            }
            (Direction::ToNode, ProtocolMessage::AccessGrant { node_id, .. }) => {
                if !joined_ok.get(node_id).copied().unwrap_or(false) {
                    bad.push(format!(
                        "tick {}: grant to {node_id} without a verified join",
                        entry.tick
                    ));
                }
                if !reported.get(node_id).copied().unwrap_or(false) {
                    bad.push(format!(
                        "tick {}: grant to {node_id} without a matching attestation",
                        entry.tick
                    ));
                }
            }
            _ => {}
        }
    }
    bad
}

/// Every ProvisionVm and ComponentUpdate must satisfy the node's profile.
pub fn coverage_violations(transcript: &[TranscriptEntry], profiles: &BTreeMap<String, NodeProfile>) -> Vec<String> {
    transcript
        .iter()
        .filter_map(|e| match &e.envelope.body {
            ProtocolMessage::ProvisionVm { component_set, .. }
            | ProtocolMessage::ComponentUpdate { component_set, .. } => {
                let profile = &profiles[&e.node_id];
                (!covers(profile, component_set))
                    .then(|| format!("tick {}: {} set violates profile", e.tick, e.node_id))
            }
            _ => None,
        })
        .collect()
}

use vsoa::agent::{LinkError, NodeAgent, ServerLink};
use vsoa::crypto::Pki;
use vsoa::evidence::EvidenceStore;
use vsoa::server::{SecurityServer, ServerConfig};
use vsoa::wire::Envelope;

/// Synchronous in-process link. Pushes are collected for the test to
/// deliver; `down` makes every call fail.
pub struct DirectLink<'a> {
    pub server: &'a mut SecurityServer,
    pub tick: u64,
    pub down: bool,
    pub sent: Vec<Envelope>,
    pub pushes: Vec<Envelope>,
}

impl<'a> DirectLink<'a> {
    pub fn new(server: &'a mut SecurityServer, tick: u64) -> Self {
        Self {
            server,
            tick,
            down: false,
            sent: Vec::new(),
            pushes: Vec::new(),
        }
    }
}

impl ServerLink for DirectLink<'_> {
    fn call(&mut self, request: Envelope) -> Result<Envelope, LinkError> {
        if self.down {
            return Err(LinkError::Unreachable("down".into()));
        }
        self.sent.push(request.clone());
        let out = self.server.handle(&request, self.tick);
        self.pushes.extend(out.pushes);
        Ok(out.reply)
    }
}

pub fn server_with(pki: &Pki, config: ServerConfig) -> SecurityServer {
    SecurityServer::new(
        pki.clone(),
        vsoa::fixtures::default_catalog(pki),
        EvidenceStore::in_memory(),
        config,
    )
    .unwrap()
}

pub fn server(pki: &Pki) -> SecurityServer {
    server_with(pki, ServerConfig::default())
}

pub fn agent(pki: &Pki, server: &SecurityServer, node_id: &str) -> NodeAgent {
    NodeAgent::new(
        pki.node(node_id),
        pki.publisher_pk().clone(),
        server.public_key().clone(),
        vsoa::fixtures::default_profile(node_id),
        vsoa::fixtures::node_stack(node_id, 1, pki),
    )
}
