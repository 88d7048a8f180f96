//! The security server: admission, component provisioning, infection
//! reports, evidence storage, deep analysis and clean-VM delivery.
//!
//! The server is transport-agnostic: [`SecurityServer::handle`] takes one
//! request envelope and returns the direct reply plus any messages pushed
//! to the node afterwards (clean VMs, component updates).

pub mod catalog;
pub mod select;

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::crypto::{
    append_custody, issue_token, verifies, AccessToken, CustodyAction, Digest, Identity, KeyOwner, Pki, PublicKey,
};
use crate::detect::{anomaly_scan, signature_scan, AnomalyThreshold, Observation, Verdict};
use crate::evidence::{EvidenceBundle, EvidenceStore, StoreError};
use crate::journal::Journal;
use crate::model::{NodeProfile, Resource, SecurityComponentDescriptor, VmImage};
use crate::wire::{attestation_report_valid, DenyReason, Envelope, ProtocolMessage, StackAttestation};
use crate::Tick;

pub use catalog::ComponentCatalog;
pub use select::{satisfies, select_components, SelectError};

pub const DEFAULT_LEASE_TICKS: Tick = 600;
pub const SERVER_SENDER: &str = "server";

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("node {0} is not admitted")]
    UnadmittedNode(String),
    #[error("no clean image for manifest {0:?}")]
    UnknownManifest(Vec<String>),
    #[error("unknown component {0}")]
    UnknownComponent(String),
    #[error("component set does not satisfy the profile of node {0}")]
    UpdateViolatesProfile(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub lease_ticks: Tick,
    pub token_ttl: Tick,
    pub anomaly_threshold: AnomalyThreshold,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            lease_ticks: DEFAULT_LEASE_TICKS,
            token_ttl: DEFAULT_LEASE_TICKS,
            anomaly_threshold: AnomalyThreshold::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct NodeRecord {
    pub profile: NodeProfile,
    pub node_pk: PublicKey,
    /// `None` until the security VM has been attested.
    pub lease_expiry: Option<Tick>,
    pub component_set: Vec<String>,
    pub attested_core: Digest,
    pub expected_security_vm: Digest,
    pending_update: Option<(String, Vec<String>)>,
}

impl NodeRecord {
    pub fn admitted_at(&self, now: Tick) -> bool {
        self.lease_expiry.is_some_and(|exp| now < exp)
    }
}

#[derive(Clone, Debug, Default)]
pub struct NodeRegistry {
    nodes: BTreeMap<String, NodeRecord>,
}

impl NodeRegistry {
    pub fn get(&self, node_id: &str) -> Option<&NodeRecord> {
        self.nodes.get(node_id)
    }

    pub fn is_admitted(&self, node_id: &str, now: Tick) -> bool {
        self.nodes.get(node_id).is_some_and(|r| r.admitted_at(now))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Deep-analysis work item, keyed by the report that announced it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnalysisJob {
    pub node_id: String,
    pub vm_id: String,
    pub tick: Tick,
    pub bundle: Option<Digest>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisResult {
    pub bundle: Digest,
    pub tick: Tick,
    pub verdicts: Vec<(String, Verdict)>,
}

pub struct ServerReply {
    pub reply: Envelope,
    pub pushes: Vec<Envelope>,
}

pub struct SecurityServer {
    pki: Pki,
    identity: Identity,
    catalog: ComponentCatalog,
    registry: NodeRegistry,
    store: EvidenceStore,
    config: ServerConfig,
    reports: BTreeSet<(String, String, Tick)>,
    queue: Vec<AnalysisJob>,
    analyses: Vec<AnalysisResult>,
    seq: u64,
    journal: Journal,
}

impl SecurityServer {
    pub fn new(
        pki: Pki,
        catalog: ComponentCatalog,
        store: EvidenceStore,
        config: ServerConfig,
    ) -> Result<Self, StoreError> {
        store.record_trust_root(pki.publisher_pk())?;
        Ok(Self {
            identity: pki.server(),
            pki,
            catalog,
            registry: NodeRegistry::default(),
            store,
            config,
            reports: BTreeSet::new(),
            queue: Vec::new(),
            analyses: Vec::new(),
            seq: 0,
            journal: Journal::disabled(),
        })
    }

    pub fn with_journal(mut self, journal: Journal) -> Self {
        self.journal = journal;
        self
    }

    pub fn public_key(&self) -> &PublicKey {
        self.identity.public_key()
    }

    pub fn pki(&self) -> &Pki {
        &self.pki
    }

    pub fn catalog(&self) -> &ComponentCatalog {
        &self.catalog
    }

    pub fn catalog_mut(&mut self) -> &mut ComponentCatalog {
        &mut self.catalog
    }

    pub fn registry(&self) -> &NodeRegistry {
        &self.registry
    }

    pub fn store(&self) -> &EvidenceStore {
        &self.store
    }

    pub fn analysis_queue(&self) -> &[AnalysisJob] {
        &self.queue
    }

    pub fn analyses(&self) -> &[AnalysisResult] {
        &self.analyses
    }

    fn envelope(&mut self, now: Tick, reply_to: Option<u64>, body: ProtocolMessage) -> Envelope {
        self.seq += 1;
        Envelope {
            sender: SERVER_SENDER.to_string(),
            seq: self.seq,
            tick: now,
            reply_to,
            body,
        }
    }

    fn note(&self, now: Tick, kind: &str, detail: String) {
        self.journal.record(now, SERVER_SENDER, kind, detail);
    }

    /// Dispatches one request from a node.
    pub fn handle(&mut self, request: &Envelope, now: Tick) -> ServerReply {
        // The reply is numbered before any push it triggers.
        self.seq += 1;
        let reply_seq = self.seq;
        let mut pushes = Vec::new();
        let body = match &request.body {
            ProtocolMessage::JoinRequest {
                node_id,
                profile,
                stack_attestation,
            } => self.handle_join(node_id, profile, stack_attestation, now),
            ProtocolMessage::AttestationReport {
                node_id,
                security_vm_hash,
                signature,
            } => {
                let renewal = self.registry.is_admitted(node_id, now);
                let reply = self.handle_attestation(node_id, *security_vm_hash, signature, now);
                if renewal && matches!(reply, ProtocolMessage::AccessGrant { .. }) {
                    // Tokens are refreshed together with the lease.
                    let set = self.registry.nodes[node_id].component_set.clone();
                    if let Ok(update) = self.push_component_update(node_id, &set, now) {
                        pushes.push(update);
                    }
                }
                reply
            }
            ProtocolMessage::InfectionReport {
                node_id,
                vm_id,
                verdict,
            } => match self.handle_infection_report(node_id, vm_id, verdict, request.seq, now) {
                Ok(ack) => ack,
                Err(_) => ProtocolMessage::AccessDenied {
                    node_id: node_id.clone(),
                    reason: DenyReason::NotAdmitted,
                },
            },
            ProtocolMessage::EvidenceTransfer { bundle } => {
                let stored = match self.store_evidence(bundle, now) {
                    Ok(addr) | Err(StoreError::DuplicateBundle(addr)) => Ok(addr),
                    Err(e) => Err(e),
                };
                match stored {
                    Ok(addr) => {
                        let node_id = &bundle.meta.node_id;
                        match self.issue_clean_vm(node_id, &bundle.meta.app_manifest, now) {
                            Ok(image) => {
                                let delivery = ProtocolMessage::CleanVmDelivery {
                                    vm_id: bundle.meta.vm_id.clone(),
                                    guest_image: image,
                                };
                                let env = self.envelope(now, None, delivery);
                                pushes.push(env);
                            }
                            Err(e) => self.note(now, "clean_vm_withheld", format!("node={node_id};reason={e}")),
                        }
                        ProtocolMessage::Ack { ref_id: addr.to_hex() }
                    }
                    Err(e) => {
                        let reason = match e {
                            StoreError::CustodyBroken(_) => DenyReason::CustodyBroken,
                            StoreError::SnapshotMismatch => DenyReason::IntegrityFailure,
                            _ => DenyReason::CustodyBroken,
                        };
                        self.note(
                            now,
                            "evidence_rejected",
                            format!("node={};error={e}", bundle.meta.node_id),
                        );
                        ProtocolMessage::AccessDenied {
                            node_id: bundle.meta.node_id.clone(),
                            reason,
                        }
                    }
                }
            }
            ProtocolMessage::Ack { ref_id } => {
                self.handle_ack(&request.sender, ref_id, now);
                ProtocolMessage::Ack {
                    ref_id: format!("ack:{}", request.seq),
                }
            }
            other => {
                self.note(
                    now,
                    "unexpected_message",
                    format!("from={};type={}", request.sender, other.kind()),
                );
                ProtocolMessage::AccessDenied {
                    node_id: request.sender.clone(),
                    reason: DenyReason::NotAdmitted,
                }
            }
        };
        let reply = Envelope {
            sender: SERVER_SENDER.to_string(),
            seq: reply_seq,
            tick: now,
            reply_to: Some(request.seq),
            body,
        };
        ServerReply { reply, pushes }
    }

    /// Admission, part one: verify the node's stack attestation, select its
    /// component set and provision the security VM. The registry is only
    /// touched on success.
    pub fn handle_join(
        &mut self,
        node_id: &str,
        profile: &NodeProfile,
        attestation: &StackAttestation,
        now: Tick,
    ) -> ProtocolMessage {
        let deny = |reason| ProtocolMessage::AccessDenied {
            node_id: node_id.to_string(),
            reason,
        };
        let verdict = (|| {
            if attestation.node.owner != KeyOwner::Node(node_id.to_string())
                || !attestation.node.verify(self.pki.publisher_pk())
            {
                return Err(DenyReason::UnknownKey);
            }
            if !attestation.signature_valid() {
                return Err(DenyReason::BadSignature);
            }
            if !verifies(
                self.pki.publisher_pk(),
                attestation.core_hash.as_bytes(),
                &attestation.core_signature,
            ) {
                return Err(DenyReason::IntegrityFailure);
            }
            if profile.node_id != node_id || !profile.is_admissible() {
                return Err(DenyReason::InvalidProfile);
            }
            select_components(profile, &self.catalog.descriptors()).map_err(|_| DenyReason::InfeasibleProfile)
        })();

        let components = match verdict {
            Ok(c) => c,
            Err(reason) => {
                self.note(now, "join_denied", format!("node={node_id};reason={reason:?}"));
                return deny(reason);
            }
        };
        let tokens = self.tokens_for(&components, now);
        let security_image = self.catalog.security_env_image().clone();
        let ids: Vec<String> = components.iter().map(|c| c.component_id.clone()).collect();
        self.note(
            now,
            "join_provisioned",
            format!("node={node_id};components={}", ids.join(",")),
        );
        self.registry.nodes.insert(
            node_id.to_string(),
            NodeRecord {
                profile: profile.clone(),
                node_pk: attestation.node.public_key.clone(),
                lease_expiry: None,
                component_set: ids,
                attested_core: attestation.core_hash,
                expected_security_vm: security_image.content_hash,
                pending_update: None,
            },
        );
        ProtocolMessage::ProvisionVm {
            security_image,
            component_set: components,
            tokens,
        }
    }

    fn tokens_for(&self, components: &[SecurityComponentDescriptor], now: Tick) -> Vec<AccessToken> {
        let expiry = now + self.config.token_ttl.max(1);
        components
            .iter()
            .flat_map(|c| {
                let resources: BTreeSet<Resource> = c
                    .capabilities
                    .iter()
                    .flat_map(|cap| crate::detect::detectors_for(cap).iter().map(|(_, r)| *r))
                    .collect();
                resources.into_iter().map(move |r| (c.component_id.clone(), r))
            })
            .map(|(id, r)| issue_token(&self.identity.keys, &id, r, expiry, now).expect("expiry is in the future"))
            .collect()
    }

    /// Admission, part two: the node proves its security VM runs the image
    /// it was given. Only then does it get network access.
    pub fn handle_attestation(
        &mut self,
        node_id: &str,
        security_vm_hash: Digest,
        signature: &crate::crypto::Signature,
        now: Tick,
    ) -> ProtocolMessage {
        let result = match self.registry.nodes.get(node_id) {
            None => Err(DenyReason::NotProvisioned),
            Some(r) if !attestation_report_valid(&r.node_pk, node_id, security_vm_hash, signature) => {
                Err(DenyReason::BadSignature)
            }
            Some(r) if r.expected_security_vm != security_vm_hash => Err(DenyReason::SecurityVmMismatch),
            Some(_) => Ok(()),
        };
        match result {
            Ok(()) => {
                let lease = self.config.lease_ticks;
                let rec = self.registry.nodes.get_mut(node_id).expect("checked above");
                rec.lease_expiry = Some(now + lease);
                self.note(now, "attest_ok", format!("node={node_id};lease_expiry={}", now + lease));
                ProtocolMessage::AccessGrant {
                    node_id: node_id.to_string(),
                    lease_ticks: lease,
                }
            }
            Err(reason) => {
                self.note(now, "attest_fail", format!("node={node_id};reason={reason:?}"));
                ProtocolMessage::AccessDenied {
                    node_id: node_id.to_string(),
                    reason,
                }
            }
        }
    }

    /// Logs the report and queues deep analysis for the bundle that will
    /// follow. Repeats of (node, vm, tick) are acknowledged but not queued.
    pub fn handle_infection_report(
        &mut self,
        node_id: &str,
        vm_id: &str,
        verdict: &Verdict,
        report_seq: u64,
        now: Tick,
    ) -> Result<ProtocolMessage, ServerError> {
        if !self.registry.is_admitted(node_id, now) {
            self.note(now, "report_refused", format!("node={node_id};vm={vm_id}"));
            return Err(ServerError::UnadmittedNode(node_id.to_string()));
        }
        let key = (node_id.to_string(), vm_id.to_string(), now);
        if self.reports.insert(key) {
            self.queue.push(AnalysisJob {
                node_id: node_id.to_string(),
                vm_id: vm_id.to_string(),
                tick: now,
                bundle: None,
            });
            self.note(
                now,
                "report_logged",
                format!("node={node_id};vm={vm_id};verdict={verdict}"),
            );
        }
        Ok(ProtocolMessage::Ack {
            ref_id: format!("report:{report_seq}"),
        })
    }

    /// Verifies custody, countersigns it and persists the bundle.
    pub fn store_evidence(&mut self, bundle: &EvidenceBundle, now: Tick) -> Result<Digest, StoreError> {
        if !bundle.snapshot_intact() {
            return Err(StoreError::SnapshotMismatch);
        }
        let from_node = bundle
            .custody
            .first()
            .is_some_and(|r| r.actor.owner == KeyOwner::Node(bundle.meta.node_id.clone()));
        if !from_node {
            return Err(StoreError::CustodyBroken(0));
        }
        if let Some(i) = bundle.first_broken_custody(self.pki.publisher_pk()) {
            return Err(StoreError::CustodyBroken(i));
        }
        let address = bundle.address();
        if self.store.contains(&address) {
            return Err(StoreError::DuplicateBundle(address));
        }
        let mut stored = bundle.clone();
        append_custody(&mut stored.custody, address, &self.identity, CustodyAction::Stored, now);
        self.store.put(&stored)?;

        let meta = &bundle.meta;
        match self
            .queue
            .iter_mut()
            .find(|j| j.bundle.is_none() && j.node_id == meta.node_id && j.vm_id == meta.vm_id)
        {
            Some(job) => job.bundle = Some(address),
            None => self.queue.push(AnalysisJob {
                node_id: meta.node_id.clone(),
                vm_id: meta.vm_id.clone(),
                tick: now,
                bundle: Some(address),
            }),
        }
        self.note(
            now,
            "evidence_stored",
            format!(
                "node={};vm={};halt_tick={};snapshot={};bundle={address}",
                meta.node_id, meta.vm_id, meta.halt_tick, meta.snapshot_hash
            ),
        );
        Ok(address)
    }

    pub fn issue_clean_vm(&self, node_id: &str, app_manifest: &[String], now: Tick) -> Result<VmImage, ServerError> {
        if !self.registry.is_admitted(node_id, now) {
            return Err(ServerError::UnadmittedNode(node_id.to_string()));
        }
        self.catalog
            .clean_image(app_manifest)
            .cloned()
            .ok_or_else(|| ServerError::UnknownManifest(app_manifest.to_vec()))
    }

    /// Builds a component update for an admitted node. The registry adopts
    /// the new set when the node acknowledges it.
    pub fn push_component_update(
        &mut self,
        node_id: &str,
        component_ids: &[String],
        now: Tick,
    ) -> Result<Envelope, ServerError> {
        let record = self
            .registry
            .nodes
            .get(node_id)
            .filter(|r| r.admitted_at(now))
            .ok_or_else(|| ServerError::UnadmittedNode(node_id.to_string()))?;
        let mut set = Vec::new();
        for id in component_ids {
            set.push(
                self.catalog
                    .get(id)
                    .cloned()
                    .ok_or_else(|| ServerError::UnknownComponent(id.clone()))?,
            );
        }
        set.sort_by(|a, b| a.component_id.cmp(&b.component_id));
        set.dedup_by(|a, b| a.component_id == b.component_id);
        if !satisfies(&record.profile, &set) {
            return Err(ServerError::UpdateViolatesProfile(node_id.to_string()));
        }
        let tokens = self.tokens_for(&set, now);
        let security_image = self.catalog.security_env_image().clone();
        let ids: Vec<String> = set.iter().map(|c| c.component_id.clone()).collect();
        let env = self.envelope(
            now,
            None,
            ProtocolMessage::ComponentUpdate {
                security_image: security_image.clone(),
                component_set: set,
                tokens,
            },
        );
        let rec = self.registry.nodes.get_mut(node_id).expect("checked above");
        rec.pending_update = Some((format!("update:{}", env.seq), ids.clone()));
        rec.expected_security_vm = security_image.content_hash;
        self.note(
            now,
            "update_pushed",
            format!("node={node_id};components={}", ids.join(",")),
        );
        Ok(env)
    }

    fn handle_ack(&mut self, sender: &str, ref_id: &str, now: Tick) {
        let Some(node_id) = sender.strip_prefix("node:") else {
            return;
        };
        if let Some(rec) = self.registry.nodes.get_mut(node_id) {
            if rec.pending_update.as_ref().is_some_and(|(r, _)| r == ref_id) {
                let (_, ids) = rec.pending_update.take().expect("checked");
                rec.component_set = ids;
                self.journal.record(
                    now,
                    SERVER_SENDER,
                    "update_applied",
                    format!("node={node_id};components={}", rec.component_set.join(",")),
                );
            }
        }
    }

    /// Re-runs every catalog detector over each stored snapshot waiting in
    /// the queue and countersigns the result into its custody chain.
    pub fn run_deep_analysis(&mut self, now: Tick) -> Result<Vec<AnalysisResult>, StoreError> {
        let (ready, waiting): (Vec<_>, Vec<_>) = std::mem::take(&mut self.queue)
            .into_iter()
            .partition(|j| j.bundle.is_some());
        self.queue = waiting;
        let mut results = Vec::new();
        for job in ready {
            let address = job.bundle.expect("partitioned on bundle");
            let bundle = self.store.get(&address)?;
            let obs = Observation {
                vm_id: job.vm_id.clone(),
                tick: now,
                resource: Resource::GuestDisk,
                data: bundle.snapshot,
            };
            let verdicts = vec![
                ("signature".to_string(), signature_scan(&obs, self.catalog.ruleset())),
                ("anomaly".to_string(), anomaly_scan(&obs, self.config.anomaly_threshold)),
            ];
            let mut chain = bundle.custody.clone();
            append_custody(&mut chain, address, &self.identity, CustodyAction::Analyzed, now);
            self.store
                .append_custody(&address, chain.pop().expect("just appended"))?;
            let summary: Vec<String> = verdicts.iter().map(|(k, v)| format!("{k}:{v}")).collect();
            self.note(
                now,
                "analysis_done",
                format!("bundle={address};verdicts={}", summary.join(",")),
            );
            results.push(AnalysisResult {
                bundle: address,
                tick: now,
                verdicts,
            });
        }
        self.analyses.extend(results.iter().cloned());
        Ok(results)
    }
}
