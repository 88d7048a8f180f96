//! The per-node agent: a simulated hypervisor over the node's layer stack
//! and the guard running inside the security VM.
//!
//! The agent talks to the server only through a [`ServerLink`]. Messages
//! the server pushes on its own (clean VMs, component updates) are handed
//! to [`NodeAgent::handle_push`] by whoever owns the transport.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::crypto::{
    append_custody, check_access, check_integrity, AccessToken, CustodyAction, Digest, Identity, PublicKey,
};
use crate::detect::{
    anomaly_scan, detectors_for, signature_scan, AnomalyThreshold, Detector, Observation, Ruleset, Verdict,
};
use crate::evidence::{EvidenceBundle, EvidenceMeta};
use crate::journal::Journal;
use crate::model::{
    core_image_intact, LayerStack, ModelError, NodeProfile, SecurityComponentDescriptor, VmEvent, VmImage, VmInstance,
    VmKind, VmState,
};
use crate::server::catalog::security_ruleset;
use crate::wire::{attestation_report_bytes, DenyReason, Envelope, ProtocolMessage, StackAttestation};
use crate::Tick;

/// Ticks to wait after the first, second and third failed transfer attempt.
pub const TRANSFER_BACKOFF: [Tick; 3] = [1, 2, 4];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LinkError {
    #[error("server unreachable: {0}")]
    Unreachable(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// Request/response channel to the security server.
pub trait ServerLink {
    fn call(&mut self, request: Envelope) -> Result<Envelope, LinkError>;
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("core image failed its integrity self-check")]
    IntegritySelfCheckFailed,
    #[error("image {0} failed its integrity check")]
    IntegrityFailure(String),
    #[error("server denied the request: {0:?}")]
    Denied(DenyReason),
    #[error("node is not admitted")]
    NotAdmitted,
    #[error("unknown vm {0}")]
    UnknownVm(String),
    #[error("vm {0} is not running")]
    TargetNotRunning(String),
    #[error("replacement manifest {got:?} does not match {want:?}")]
    ManifestMismatch { want: Vec<String>, got: Vec<String> },
    #[error("transfer of {vm_id} failed after {attempts} attempts; bundle kept for retry")]
    TransferFailed { vm_id: String, attempts: u32 },
    #[error("unexpected reply {0}")]
    UnexpectedReply(String),
    #[error("access tokens expired on arrival; server and agent disagree on the tick length or clock")]
    StaleTokens,
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BootOutcome {
    Admitted,
    Denied(DenyReason),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResponseAction {
    None,
    HaltAndQuarantine,
}

/// One observation delivered to one component in a guard cycle.
#[derive(Clone, Debug, PartialEq)]
pub struct GuardRecord {
    pub component_id: String,
    pub observation: Observation,
    pub verdict: Verdict,
    pub action: ResponseAction,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Replacement {
    pub old_vm: String,
    pub new_vm: String,
    pub halt_tick: Tick,
    pub replace_tick: Tick,
    pub payload_hash: Digest,
}

impl Replacement {
    pub fn downtime(&self) -> Tick {
        self.replace_tick - self.halt_tick
    }
}

#[derive(Clone, Debug)]
struct PendingTransfer {
    bundle: EvidenceBundle,
    next_attempt: Tick,
    failures: u32,
}

/// The installed security environment: VM, components, their tokens and
/// the rules they scan with. Swapped as a whole on updates.
#[derive(Clone, Debug)]
struct SecurityEnv {
    components: Vec<SecurityComponentDescriptor>,
    tokens: Vec<AccessToken>,
    ruleset: Ruleset,
}

#[derive(Clone, Debug, Default)]
pub struct AgentConfig {
    pub anomaly_threshold: AnomalyThreshold,
    /// Skips the boot-time core self-check. Models a compromised agent so
    /// the server side of attestation can be exercised.
    pub skip_self_check: bool,
}

pub struct NodeAgent {
    node_id: String,
    identity: Identity,
    publisher_pk: PublicKey,
    server_pk: PublicKey,
    profile: NodeProfile,
    stack: LayerStack,
    config: AgentConfig,
    env: Option<SecurityEnv>,
    security_generation: u64,
    lease_expiry: Option<Tick>,
    lease_ticks: Tick,
    seq: u64,
    /// Per guest: (offset, tick) pairs; bytes from `offset` on are not
    /// observable before `tick`.
    dormant: BTreeMap<String, Vec<(usize, Tick)>>,
    pending: BTreeMap<String, PendingTransfer>,
    /// Transferred bundles whose VM still waits for a clean replacement.
    awaiting_replacement: BTreeMap<String, EvidenceBundle>,
    stored: BTreeMap<String, Digest>,
    replacements: Vec<Replacement>,
    journal: Journal,
}

impl NodeAgent {
    pub fn new(
        identity: Identity,
        publisher_pk: PublicKey,
        server_pk: PublicKey,
        profile: NodeProfile,
        stack: LayerStack,
    ) -> Self {
        Self {
            node_id: profile.node_id.clone(),
            identity,
            publisher_pk,
            server_pk,
            profile,
            stack,
            config: AgentConfig::default(),
            env: None,
            security_generation: 0,
            lease_expiry: None,
            lease_ticks: 0,
            seq: 0,
            dormant: BTreeMap::new(),
            pending: BTreeMap::new(),
            awaiting_replacement: BTreeMap::new(),
            stored: BTreeMap::new(),
            replacements: Vec::new(),
            journal: Journal::disabled(),
        }
    }

    pub fn with_config(mut self, config: AgentConfig) -> Self {
        self.config = config;
        self
    }

    pub fn with_journal(mut self, journal: Journal) -> Self {
        self.journal = journal;
        self
    }

    pub fn node_id(&self) -> &str {
        &self.node_id
    }

    pub fn stack(&self) -> &LayerStack {
        &self.stack
    }

    pub fn profile(&self) -> &NodeProfile {
        &self.profile
    }

    pub fn is_admitted(&self, now: Tick) -> bool {
        self.lease_expiry.is_some_and(|exp| now < exp)
    }

    pub fn lease_expiry(&self) -> Option<Tick> {
        self.lease_expiry
    }

    pub fn component_ids(&self) -> Vec<String> {
        self.env
            .as_ref()
            .map(|e| e.components.iter().map(|c| c.component_id.clone()).collect())
            .unwrap_or_default()
    }

    pub fn tokens(&self) -> &[AccessToken] {
        self.env.as_ref().map(|e| e.tokens.as_slice()).unwrap_or_default()
    }

    pub fn replacements(&self) -> &[Replacement] {
        &self.replacements
    }

    /// Server-acknowledged evidence addresses by VM id.
    pub fn stored_evidence(&self) -> &BTreeMap<String, Digest> {
        &self.stored
    }

    pub fn pending_transfers(&self) -> usize {
        self.pending.len()
    }

    pub fn awaiting_replacement(&self) -> impl Iterator<Item = &str> {
        self.awaiting_replacement.keys().map(String::as_str)
    }

    fn note(&self, tick: Tick, kind: &str, detail: String) {
        self.journal.record(tick, &self.node_id, kind, detail);
    }

    fn envelope(&mut self, tick: Tick, reply_to: Option<u64>, body: ProtocolMessage) -> Envelope {
        self.seq += 1;
        Envelope {
            sender: format!("node:{}", self.node_id),
            seq: self.seq,
            tick,
            reply_to,
            body,
        }
    }

    fn send(
        &mut self,
        link: &mut dyn ServerLink,
        tick: Tick,
        body: ProtocolMessage,
    ) -> Result<ProtocolMessage, AgentError> {
        let request = self.envelope(tick, None, body);
        let reply = link.call(request)?;
        Ok(reply.body)
    }

    /// Self-check, join, install the provisioned security VM, attest it.
    /// Guest VMs start only once access is granted.
    pub fn boot_sequence(&mut self, link: &mut dyn ServerLink, tick: Tick) -> Result<BootOutcome, AgentError> {
        if !self.config.skip_self_check && !core_image_intact(&self.stack, &self.publisher_pk) {
            self.note(
                tick,
                "self_check_failed",
                format!("core={}", self.stack.core_image.image_id),
            );
            return Err(AgentError::IntegritySelfCheckFailed);
        }
        let attestation = StackAttestation::measure(&self.stack, &self.identity);
        let reply = self.send(
            link,
            tick,
            ProtocolMessage::JoinRequest {
                node_id: self.node_id.clone(),
                profile: self.profile.clone(),
                stack_attestation: attestation,
            },
        )?;
        let (image, components, tokens) = match reply {
            ProtocolMessage::ProvisionVm {
                security_image,
                component_set,
                tokens,
            } => (security_image, component_set, tokens),
            ProtocolMessage::AccessDenied { reason, .. } => {
                self.note(tick, "boot_denied", format!("stage=join;reason={reason:?}"));
                return Ok(BootOutcome::Denied(reason));
            }
            other => return Err(AgentError::UnexpectedReply(other.kind().into())),
        };
        self.install_security_env(image, components, tokens, tick)?;

        match self.attest(link, tick)? {
            BootOutcome::Admitted => {}
            denied => return Ok(denied),
        }
        for vm in &mut self.stack.guest_vms {
            if vm.state() == VmState::Provisioned {
                vm.apply(VmEvent::Start, tick)?;
                self.journal
                    .record(tick, &self.node_id, "vm_started", format!("vm={}", vm.vm_id));
            }
        }
        // Evidence whose replacement never arrived (server restart, lost
        // push) is offered again; the server answers duplicates with a
        // fresh clean VM.
        let waiting: Vec<EvidenceBundle> = self.awaiting_replacement.values().cloned().collect();
        for bundle in waiting {
            self.pending
                .entry(bundle.meta.vm_id.clone())
                .or_insert(PendingTransfer {
                    bundle,
                    next_attempt: tick,
                    failures: 0,
                });
        }
        Ok(BootOutcome::Admitted)
    }

    fn attest(&mut self, link: &mut dyn ServerLink, tick: Tick) -> Result<BootOutcome, AgentError> {
        let hash = self
            .stack
            .security_vm
            .as_ref()
            .map(VmInstance::payload_hash)
            .ok_or(AgentError::NotAdmitted)?;
        let signature = self.identity.sign(&attestation_report_bytes(&self.node_id, hash));
        let reply = self.send(
            link,
            tick,
            ProtocolMessage::AttestationReport {
                node_id: self.node_id.clone(),
                security_vm_hash: hash,
                signature,
            },
        )?;
        match reply {
            ProtocolMessage::AccessGrant { lease_ticks, .. } => {
                self.lease_ticks = lease_ticks;
                self.lease_expiry = Some(tick + lease_ticks);
                self.note(tick, "admitted", format!("lease_expiry={}", tick + lease_ticks));
                Ok(BootOutcome::Admitted)
            }
            ProtocolMessage::AccessDenied { reason, .. } => {
                self.lease_expiry = None;
                self.note(tick, "boot_denied", format!("stage=attest;reason={reason:?}"));
                Ok(BootOutcome::Denied(reason))
            }
            other => Err(AgentError::UnexpectedReply(other.kind().into())),
        }
    }

    /// Verifies and starts a security VM, retiring the previous one, and
    /// swaps in the new component set in one step.
    fn install_security_env(
        &mut self,
        image: VmImage,
        mut components: Vec<SecurityComponentDescriptor>,
        tokens: Vec<AccessToken>,
        tick: Tick,
    ) -> Result<(), AgentError> {
        if image.kind != VmKind::SecurityEnv || !check_integrity(&image, &self.publisher_pk) {
            self.note(tick, "security_image_rejected", format!("image={}", image.image_id));
            return Err(AgentError::IntegrityFailure(image.image_id));
        }
        let ruleset = security_ruleset(&image).map_err(|_| AgentError::IntegrityFailure(image.image_id.clone()))?;
        self.security_generation += 1;
        let mut vm = VmInstance::provision(format!("sec.{}", self.security_generation), image);
        vm.apply(VmEvent::Start, tick)?;
        if let Some(old) = self.stack.security_vm.as_mut() {
            if old.is_running() {
                old.apply(VmEvent::Replace, tick)?;
            }
        }
        components.sort_by(|a, b| a.component_id.cmp(&b.component_id));
        let ids: Vec<&str> = components.iter().map(|c| c.component_id.as_str()).collect();
        self.note(
            tick,
            "security_vm_running",
            format!(
                "vm={};image={};components={}",
                vm.vm_id,
                vm.image.image_id,
                ids.join(",")
            ),
        );
        self.stack.security_vm = Some(vm);
        self.env = Some(SecurityEnv {
            components,
            tokens,
            ruleset,
        });
        Ok(())
    }

    /// Appends `pattern` to a running guest. The new bytes become visible to
    /// observation at `visible_at`.
    pub fn expose(&mut self, vm_id: &str, pattern: &[u8], tick: Tick, visible_at: Tick) -> Result<(), AgentError> {
        let vm = self
            .stack
            .guest_mut(vm_id)
            .ok_or_else(|| AgentError::UnknownVm(vm_id.to_string()))?;
        if !vm.is_running() {
            return Err(AgentError::TargetNotRunning(vm_id.to_string()));
        }
        let offset = vm.image.payload.len();
        vm.image.payload.extend_from_slice(pattern);
        self.dormant
            .entry(vm_id.to_string())
            .or_default()
            .push((offset, visible_at.max(tick)));
        self.note(
            tick,
            "payload_mutated",
            format!(
                "vm={vm_id};offset={offset};len={};visible_at={visible_at}",
                pattern.len()
            ),
        );
        Ok(())
    }

    /// What the guard can read from a guest at `tick`.
    fn visible_payload(&self, vm: &VmInstance, tick: Tick) -> Vec<u8> {
        let cut = self
            .dormant
            .get(&vm.vm_id)
            .into_iter()
            .flatten()
            .filter(|(_, at)| *at > tick)
            .map(|(off, _)| *off)
            .min()
            .unwrap_or(vm.image.payload.len());
        vm.image.payload[..cut].to_vec()
    }

    /// One pass of the guard: every running guest is observed on behalf of
    /// every component holding a valid token for the resource. The first
    /// infected verdict halts the guest and starts quarantine.
    pub fn guard_cycle(&mut self, link: &mut dyn ServerLink, tick: Tick) -> Vec<GuardRecord> {
        let mut records = Vec::new();
        let Some(env) = self.env.clone().filter(|_| self.is_admitted(tick)) else {
            return records;
        };
        let mut guests: Vec<String> = self
            .stack
            .guest_vms
            .iter()
            .filter(|vm| vm.is_running())
            .map(|vm| vm.vm_id.clone())
            .collect();
        guests.sort();

        'guests: for vm_id in guests {
            for component in &env.components {
                let mut plan: Vec<(Detector, crate::model::Resource)> = Vec::new();
                for cap in &component.capabilities {
                    for d in detectors_for(cap) {
                        if !plan.contains(d) {
                            plan.push(*d);
                        }
                    }
                }
                for (detector, resource) in plan {
                    let granted = env.tokens.iter().any(|t| {
                        t.component_id == component.component_id && check_access(&self.server_pk, t, resource, tick)
                    });
                    if !granted {
                        self.note(
                            tick,
                            "access_refused",
                            format!("component={};vm={vm_id};resource={resource:?}", component.component_id),
                        );
                        continue;
                    }
                    let vm = self.stack.guest(&vm_id).expect("listed above");
                    let observation = Observation {
                        vm_id: vm_id.clone(),
                        tick,
                        resource,
                        data: self.visible_payload(vm, tick),
                    };
                    let verdict = match detector {
                        Detector::Signature => signature_scan(&observation, &env.ruleset),
                        Detector::Anomaly => anomaly_scan(&observation, self.config.anomaly_threshold),
                    };
                    let action = if verdict.is_infected() {
                        ResponseAction::HaltAndQuarantine
                    } else {
                        ResponseAction::None
                    };
                    self.journal.record_with_digest(
                        tick,
                        &self.node_id,
                        "observe",
                        format!(
                            "component={};vm={vm_id};resource={resource:?};len={};verdict={verdict}",
                            component.component_id,
                            observation.data.len()
                        ),
                        crate::crypto::hash_content(&observation.data),
                    );
                    records.push(GuardRecord {
                        component_id: component.component_id.clone(),
                        observation,
                        verdict: verdict.clone(),
                        action,
                    });
                    if action == ResponseAction::HaltAndQuarantine {
                        if let Err(e) = self.quarantine(link, &vm_id, verdict, tick) {
                            self.note(tick, "quarantine_error", format!("vm={vm_id};error={e}"));
                        }
                        continue 'guests;
                    }
                }
            }
        }
        records
    }

    /// Halt, report, duplicate, send.
    fn quarantine(
        &mut self,
        link: &mut dyn ServerLink,
        vm_id: &str,
        verdict: Verdict,
        tick: Tick,
    ) -> Result<(), AgentError> {
        self.halt_vm(vm_id, tick)?;
        match self.send(
            link,
            tick,
            ProtocolMessage::InfectionReport {
                node_id: self.node_id.clone(),
                vm_id: vm_id.to_string(),
                verdict: verdict.clone(),
            },
        ) {
            Ok(ProtocolMessage::Ack { ref_id }) => self.note(tick, "report_acked", format!("vm={vm_id};ref={ref_id}")),
            Ok(ProtocolMessage::AccessDenied {
                reason: DenyReason::NotAdmitted,
                ..
            }) => {
                self.note(tick, "report_refused", format!("vm={vm_id};reason=NotAdmitted"));
                self.lease_expiry = None;
            }
            Ok(other) => self.note(tick, "report_refused", format!("vm={vm_id};reply={}", other.kind())),
            Err(e) => self.note(tick, "report_failed", format!("vm={vm_id};error={e}")),
        }
        let bundle = self.snapshot(vm_id, verdict, tick)?;
        self.pending.insert(
            vm_id.to_string(),
            PendingTransfer {
                bundle,
                next_attempt: tick,
                failures: 0,
            },
        );
        self.flush_transfers(link, tick);
        Ok(())
    }

    pub fn halt_vm(&mut self, vm_id: &str, tick: Tick) -> Result<(), AgentError> {
        let vm = self
            .stack
            .guest_mut(vm_id)
            .ok_or_else(|| AgentError::UnknownVm(vm_id.to_string()))?;
        vm.apply(VmEvent::InfectionDetected, tick)?;
        let hash = vm.payload_hash();
        self.journal
            .record_with_digest(tick, &self.node_id, "vm_halted", format!("vm={vm_id}"), hash);
        Ok(())
    }

    /// Copies a halted guest into an evidence bundle signed by this node
    /// and moves the guest to quarantine.
    pub fn snapshot(&mut self, vm_id: &str, verdict: Verdict, tick: Tick) -> Result<EvidenceBundle, AgentError> {
        let vm = self
            .stack
            .guest_mut(vm_id)
            .ok_or_else(|| AgentError::UnknownVm(vm_id.to_string()))?;
        if vm.state() != VmState::Halted {
            return Err(ModelError::IllegalTransition {
                state: vm.state(),
                event: VmEvent::SnapshotTaken,
            }
            .into());
        }
        let halt_tick = vm.halt_tick().expect("halted vms carry a halt tick");
        let snapshot = vm.image.payload.clone();
        let meta = EvidenceMeta {
            node_id: self.node_id.clone(),
            vm_id: vm_id.to_string(),
            halt_tick,
            verdict,
            app_manifest: vm.image.app_manifest.clone(),
            snapshot_hash: crate::crypto::hash_content(&snapshot),
        };
        vm.apply(VmEvent::SnapshotTaken, tick)?;
        let mut bundle = EvidenceBundle::new(snapshot, meta);
        let address = bundle.address();
        append_custody(
            &mut bundle.custody,
            address,
            &self.identity,
            CustodyAction::Snapshotted,
            tick,
        );
        append_custody(
            &mut bundle.custody,
            address,
            &self.identity,
            CustodyAction::Transferred,
            tick,
        );
        self.journal.record_with_digest(
            tick,
            &self.node_id,
            "vm_quarantined",
            format!("vm={vm_id};snapshot={}", bundle.meta.snapshot_hash),
            address,
        );
        Ok(bundle)
    }

    /// Sends every due pending bundle, up to three attempts each, backing
    /// off 1, 2 then 4 ticks between attempts.
    pub fn flush_transfers(&mut self, link: &mut dyn ServerLink, tick: Tick) -> Vec<AgentError> {
        let due: Vec<String> = self
            .pending
            .iter()
            .filter(|(_, p)| p.next_attempt <= tick)
            .map(|(k, _)| k.clone())
            .collect();
        let mut errors = Vec::new();
        for vm_id in due {
            let bundle = self.pending[&vm_id].bundle.clone();
            let address = bundle.address();
            let result = self.send(link, tick, ProtocolMessage::EvidenceTransfer { bundle: bundle.clone() });
            match result {
                Ok(ProtocolMessage::Ack { ref_id }) if ref_id == address.to_hex() => {
                    self.pending.remove(&vm_id);
                    self.stored.insert(vm_id.clone(), address);
                    self.awaiting_replacement.insert(vm_id.clone(), bundle);
                    self.journal.record_with_digest(
                        tick,
                        &self.node_id,
                        "evidence_acked",
                        format!("vm={vm_id}"),
                        address,
                    );
                }
                other => {
                    let why = match other {
                        Ok(m) => format!("reply={}", m.kind()),
                        Err(e) => format!("error={e}"),
                    };
                    let p = self.pending.get_mut(&vm_id).expect("still pending");
                    let step = TRANSFER_BACKOFF[(p.failures % 3) as usize];
                    p.failures += 1;
                    p.next_attempt = tick + step;
                    let failures = p.failures;
                    self.note(
                        tick,
                        "transfer_retry",
                        format!("vm={vm_id};attempt={failures};next={};{why}", tick + step),
                    );
                    if failures.is_multiple_of(3) {
                        errors.push(AgentError::TransferFailed {
                            vm_id: vm_id.clone(),
                            attempts: failures,
                        });
                    }
                }
            }
        }
        errors
    }

    /// Installs a clean replacement for a quarantined guest.
    pub fn replace_vm(&mut self, vm_id: &str, image: VmImage, tick: Tick) -> Result<Replacement, AgentError> {
        let old = self
            .stack
            .guest(vm_id)
            .ok_or_else(|| AgentError::UnknownVm(vm_id.to_string()))?;
        if old.state() != VmState::Quarantined {
            return Err(ModelError::IllegalTransition {
                state: old.state(),
                event: VmEvent::Replace,
            }
            .into());
        }
        if image.kind != VmKind::GuestOs || !check_integrity(&image, &self.publisher_pk) {
            self.note(
                tick,
                "replacement_rejected",
                format!("vm={vm_id};image={}", image.image_id),
            );
            return Err(AgentError::IntegrityFailure(image.image_id));
        }
        if image.app_manifest != old.image.app_manifest {
            return Err(AgentError::ManifestMismatch {
                want: old.image.app_manifest.clone(),
                got: image.app_manifest,
            });
        }
        let halt_tick = old.halt_tick().expect("quarantined vms carry a halt tick");
        let base = vm_id.split('.').next().unwrap_or(vm_id);
        let generation = self
            .stack
            .guest_vms
            .iter()
            .filter(|vm| vm.vm_id.split('.').next() == Some(base))
            .count();
        let new_id = format!("{base}.{generation}");
        let mut fresh = VmInstance::provision(new_id.clone(), image);
        fresh.apply(VmEvent::Start, tick)?;
        self.stack
            .guest_mut(vm_id)
            .expect("checked above")
            .apply(VmEvent::Replace, tick)?;
        let replacement = Replacement {
            old_vm: vm_id.to_string(),
            new_vm: new_id.clone(),
            halt_tick,
            replace_tick: tick,
            payload_hash: fresh.payload_hash(),
        };
        self.stack.guest_vms.push(fresh);
        self.awaiting_replacement.remove(vm_id);
        self.dormant.remove(vm_id);
        self.journal.record_with_digest(
            tick,
            &self.node_id,
            "vm_replaced",
            format!("old={vm_id};new={new_id};downtime={}", replacement.downtime()),
            replacement.payload_hash,
        );
        self.replacements.push(replacement.clone());
        Ok(replacement)
    }

    /// Exchanges the security VM and component set, then acknowledges.
    /// On failure the old environment stays in place.
    pub fn apply_component_update(
        &mut self,
        link: &mut dyn ServerLink,
        update: &Envelope,
        tick: Tick,
    ) -> Result<(), AgentError> {
        let ProtocolMessage::ComponentUpdate {
            security_image,
            component_set,
            tokens,
        } = &update.body
        else {
            return Err(AgentError::UnexpectedReply(update.body.kind().into()));
        };
        if !self.is_admitted(tick) {
            return Err(AgentError::NotAdmitted);
        }
        self.install_security_env(security_image.clone(), component_set.clone(), tokens.clone(), tick)?;
        let ack = ProtocolMessage::Ack {
            ref_id: format!("update:{}", update.seq),
        };
        let request = self.envelope(tick, Some(update.seq), ack);
        link.call(request)?;
        Ok(())
    }

    /// Processes a message the server pushed without being asked.
    pub fn handle_push(&mut self, link: &mut dyn ServerLink, push: &Envelope, tick: Tick) -> Result<(), AgentError> {
        let result = match &push.body {
            ProtocolMessage::CleanVmDelivery { vm_id, guest_image } => {
                self.replace_vm(vm_id, guest_image.clone(), tick).map(|_| ())
            }
            ProtocolMessage::ComponentUpdate { .. } => self.apply_component_update(link, push, tick),
            other => Err(AgentError::UnexpectedReply(other.kind().into())),
        };
        if let Err(e) = &result {
            self.note(tick, "push_rejected", format!("type={};error={e}", push.body.kind()));
        }
        result
    }

    /// Per-tick housekeeping before the guard runs: lease renewal and
    /// transfer retries.
    pub fn maintain(&mut self, link: &mut dyn ServerLink, tick: Tick) -> Vec<AgentError> {
        let mut errors = Vec::new();
        if let Some(exp) = self.lease_expiry {
            let margin = (self.lease_ticks / 4).max(1);
            if tick < exp && tick + margin >= exp {
                match self.attest(link, tick) {
                    Ok(BootOutcome::Admitted) => {}
                    Ok(BootOutcome::Denied(reason)) => errors.push(AgentError::Denied(reason)),
                    Err(e) => errors.push(e),
                }
            }
        }
        errors.extend(self.flush_transfers(link, tick));
        errors
    }

    /// Running guests, for propagation.
    pub fn running_guests(&self) -> impl Iterator<Item = &VmInstance> {
        self.stack.guest_vms.iter().filter(|vm| vm.is_running())
    }
}
