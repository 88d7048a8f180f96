//! Node layer stack, VM images and instances, the VM lifecycle, and the
//! descriptors the security server matches components against.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{check_integrity, hash_content, verifies, Digest, KeyPair, PublicKey, Signature};
use crate::Tick;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("illegal transition: {event:?} in state {state:?}")]
    IllegalTransition { state: VmState, event: VmEvent },
    #[error("bad image fixture: {0}")]
    BadFixture(String),
    #[error("bad profile: {0}")]
    BadProfile(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VmKind {
    GuestOs,
    SecurityEnv,
}

impl FromStr for VmKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "GuestOs" => Ok(VmKind::GuestOs),
            "SecurityEnv" => Ok(VmKind::SecurityEnv),
            other => Err(ModelError::BadFixture(format!("unknown kind {other:?}"))),
        }
    }
}

/// Node resources a security component may be granted access to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Resource {
    GuestMemory,
    GuestDisk,
    NetworkTap,
}

impl Resource {
    pub const ALL: [Resource; 3] = [Resource::GuestMemory, Resource::GuestDisk, Resource::NetworkTap];
}

/// A signed machine image. Layer-four applications are opaque payload bytes
/// named by `app_manifest`.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VmImage {
    pub image_id: String,
    pub kind: VmKind,
    #[serde(with = "hex::serde")]
    pub payload: Vec<u8>,
    pub content_hash: Digest,
    pub signature: Signature,
    pub app_manifest: Vec<String>,
}

impl fmt::Debug for VmImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VmImage")
            .field("image_id", &self.image_id)
            .field("kind", &self.kind)
            .field("payload_len", &self.payload.len())
            .field("content_hash", &self.content_hash)
            .field("app_manifest", &self.app_manifest)
            .finish()
    }
}

pub const FIXTURE_MAGIC: &str = "VMIMG1";

impl VmImage {
    /// Builds an image and signs its content hash with `publisher`.
    pub fn signed(
        image_id: impl Into<String>,
        kind: VmKind,
        app_manifest: Vec<String>,
        payload: Vec<u8>,
        publisher: &KeyPair,
    ) -> Self {
        let content_hash = hash_content(&payload);
        Self {
            image_id: image_id.into(),
            kind,
            signature: publisher.sign(content_hash.as_bytes()),
            content_hash,
            payload,
            app_manifest,
        }
    }

    pub fn verify_signature(&self, publisher_pk: &PublicKey) -> bool {
        verifies(publisher_pk, self.content_hash.as_bytes(), &self.signature)
    }

    /// Fixture file encoding: magic, kind, image id and comma-separated
    /// manifest on their own lines, then the raw payload.
    pub fn to_fixture_bytes(&self) -> Vec<u8> {
        let kind = match self.kind {
            VmKind::GuestOs => "GuestOs",
            VmKind::SecurityEnv => "SecurityEnv",
        };
        let mut out = format!(
            "{FIXTURE_MAGIC}\n{kind}\n{}\n{}\n",
            self.image_id,
            self.app_manifest.join(",")
        )
        .into_bytes();
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parses a fixture. The content hash is recomputed over the payload;
    /// the caller supplies the signature (sidecar file or fresh signing).
    pub fn parse_fixture(bytes: &[u8]) -> Result<UnsignedImage, ModelError> {
        let mut rest = bytes;
        let mut lines = Vec::with_capacity(4);
        for _ in 0..4 {
            let nl = rest
                .iter()
                .position(|b| *b == b'\n')
                .ok_or_else(|| ModelError::BadFixture("truncated header".into()))?;
            let line =
                std::str::from_utf8(&rest[..nl]).map_err(|_| ModelError::BadFixture("header is not utf-8".into()))?;
            lines.push(line.to_string());
            rest = &rest[nl + 1..];
        }
        if lines[0] != FIXTURE_MAGIC {
            return Err(ModelError::BadFixture(format!("bad magic {:?}", lines[0])));
        }
        let kind = lines[1].parse()?;
        if lines[2].is_empty() {
            return Err(ModelError::BadFixture("empty image id".into()));
        }
        let app_manifest = split_list(&lines[3]);
        Ok(UnsignedImage {
            image_id: lines[2].clone(),
            kind,
            app_manifest,
            payload: rest.to_vec(),
        })
    }
}

/// A parsed fixture still waiting for a signature.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnsignedImage {
    pub image_id: String,
    pub kind: VmKind,
    pub app_manifest: Vec<String>,
    pub payload: Vec<u8>,
}

impl UnsignedImage {
    pub fn sign(self, publisher: &KeyPair) -> VmImage {
        VmImage::signed(self.image_id, self.kind, self.app_manifest, self.payload, publisher)
    }

    /// Attaches an existing signature without checking it.
    pub fn with_signature(self, signature: Signature) -> VmImage {
        VmImage {
            content_hash: hash_content(&self.payload),
            image_id: self.image_id,
            kind: self.kind,
            payload: self.payload,
            signature,
            app_manifest: self.app_manifest,
        }
    }
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VmState {
    Provisioned,
    Running,
    Halted,
    Quarantined,
    Retired,
}

impl VmState {
    pub const ALL: [VmState; 5] = [
        VmState::Provisioned,
        VmState::Running,
        VmState::Halted,
        VmState::Quarantined,
        VmState::Retired,
    ];

    /// States that carry a halt tick.
    pub fn is_stopped(self) -> bool {
        matches!(self, VmState::Halted | VmState::Quarantined | VmState::Retired)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VmEvent {
    Start,
    InfectionDetected,
    SnapshotTaken,
    Replace,
}

impl VmEvent {
    pub const ALL: [VmEvent; 4] = [
        VmEvent::Start,
        VmEvent::InfectionDetected,
        VmEvent::SnapshotTaken,
        VmEvent::Replace,
    ];
}

/// The VM lifecycle. `Replace` from `Running` is the planned exchange of a
/// security VM; from `Quarantined` it retires an infected guest.
pub fn transition(state: VmState, event: VmEvent) -> Result<VmState, ModelError> {
    use VmEvent::*;
    use VmState::*;
    match (state, event) {
        (Provisioned, Start) => Ok(Running),
        (Running, InfectionDetected) => Ok(Halted),
        (Halted, SnapshotTaken) => Ok(Quarantined),
        (Quarantined, Replace) => Ok(Retired),
        (Running, Replace) => Ok(Retired),
        _ => Err(ModelError::IllegalTransition { state, event }),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VmInstance {
    pub vm_id: String,
    pub image: VmImage,
    state: VmState,
    halt_tick: Option<Tick>,
}

impl VmInstance {
    pub fn provision(vm_id: impl Into<String>, image: VmImage) -> Self {
        Self {
            vm_id: vm_id.into(),
            image,
            state: VmState::Provisioned,
            halt_tick: None,
        }
    }

    pub fn state(&self) -> VmState {
        self.state
    }

    pub fn halt_tick(&self) -> Option<Tick> {
        self.halt_tick
    }

    pub fn is_running(&self) -> bool {
        self.state == VmState::Running
    }

    /// Applies `event` at `tick`. The halt tick is recorded on the first
    /// move into a stopped state and never changed afterwards.
    pub fn apply(&mut self, event: VmEvent, tick: Tick) -> Result<VmState, ModelError> {
        let next = transition(self.state, event)?;
        if next.is_stopped() && self.halt_tick.is_none() {
            self.halt_tick = Some(tick);
        }
        self.state = next;
        Ok(next)
    }

    pub fn payload_hash(&self) -> Digest {
        hash_content(&self.image.payload)
    }
}

/// Layers two and three of a node; layer one is just `hardware_id`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerStack {
    pub hardware_id: String,
    pub core_image: VmImage,
    pub guest_vms: Vec<VmInstance>,
    pub security_vm: Option<VmInstance>,
}

impl LayerStack {
    pub fn guest(&self, vm_id: &str) -> Option<&VmInstance> {
        self.guest_vms.iter().find(|vm| vm.vm_id == vm_id)
    }

    pub fn guest_mut(&mut self, vm_id: &str) -> Option<&mut VmInstance> {
        self.guest_vms.iter_mut().find(|vm| vm.vm_id == vm_id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StackViolation {
    MissingSecurityVm,
    DuplicateVmId(String),
    CoreImageHashMismatch,
    CoreImageBadSignature,
    ImageHashMismatch(String),
    ImageBadSignature(String),
    WrongImageKind(String),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<StackViolation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks that the node runs the expected architecture. Violations are
/// reported, never raised.
pub fn validate_stack(stack: &LayerStack, publisher_pk: &PublicKey) -> ValidationReport {
    let mut violations = Vec::new();
    let core = &stack.core_image;
    if hash_content(&core.payload) != core.content_hash {
        violations.push(StackViolation::CoreImageHashMismatch);
    }
    if !core.verify_signature(publisher_pk) {
        violations.push(StackViolation::CoreImageBadSignature);
    }
    if stack.security_vm.is_none() {
        violations.push(StackViolation::MissingSecurityVm);
    }

    let mut seen = HashSet::new();
    let vms = stack
        .guest_vms
        .iter()
        .map(|vm| (vm, VmKind::GuestOs))
        .chain(stack.security_vm.iter().map(|vm| (vm, VmKind::SecurityEnv)));
    for (vm, expected_kind) in vms {
        if !seen.insert(vm.vm_id.as_str()) {
            violations.push(StackViolation::DuplicateVmId(vm.vm_id.clone()));
        }
        if vm.image.kind != expected_kind {
            violations.push(StackViolation::WrongImageKind(vm.vm_id.clone()));
        }
        if hash_content(&vm.image.payload) != vm.image.content_hash {
            violations.push(StackViolation::ImageHashMismatch(vm.vm_id.clone()));
        }
        if !vm.image.verify_signature(publisher_pk) {
            violations.push(StackViolation::ImageBadSignature(vm.vm_id.clone()));
        }
    }
    ValidationReport { violations }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeClass {
    Desktop,
    ThinClient,
    MobileHandheld,
}

impl FromStr for NodeClass {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Desktop" => Ok(NodeClass::Desktop),
            "ThinClient" => Ok(NodeClass::ThinClient),
            "MobileHandheld" => Ok(NodeClass::MobileHandheld),
            other => Err(ModelError::BadProfile(format!("unknown node class {other:?}"))),
        }
    }
}

/// Detector or response capability. Matching is exact and case-sensitive.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CapabilityTag(String);

impl CapabilityTag {
    pub const SIGNATURE_SCAN: &'static str = "SignatureScan";
    pub const ANOMALY_SCAN: &'static str = "AnomalyScan";
    pub const FIREWALL_FILTER: &'static str = "FirewallFilter";

    pub fn new(tag: impl Into<String>) -> Self {
        Self(tag.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CapabilityTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for CapabilityTag {
    fn from(s: &str) -> Self {
        Self::new(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeProfile {
    pub node_id: String,
    pub node_class: NodeClass,
    pub cpu_budget: u64,
    pub mem_budget: u64,
    pub required_capabilities: BTreeSet<CapabilityTag>,
}

impl NodeProfile {
    /// Parses the `key=value` profile file. The node id comes from outside
    /// the file (command line), unless a `node_id` key is present.
    pub fn parse(node_id: &str, text: &str) -> Result<Self, ModelError> {
        let mut node_id = node_id.to_string();
        let mut node_class = NodeClass::Desktop;
        let mut cpu_budget = None;
        let mut mem_budget = None;
        let mut required = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ModelError::BadProfile(format!("line {}: expected key=value", n + 1)))?;
            let value = value.trim();
            let number = |v: &str| {
                v.parse::<u64>()
                    .map_err(|_| ModelError::BadProfile(format!("line {}: bad number {v:?}", n + 1)))
            };
            match key.trim() {
                "node_id" => node_id = value.to_string(),
                "node_class" => node_class = value.parse()?,
                "cpu_budget" => cpu_budget = Some(number(value)?),
                "mem_budget" => mem_budget = Some(number(value)?),
                "required_capabilities" => required = split_list(value).into_iter().map(CapabilityTag::new).collect(),
                other => return Err(ModelError::BadProfile(format!("line {}: unknown key {other:?}", n + 1))),
            }
        }
        Ok(Self {
            node_id,
            node_class,
            cpu_budget: cpu_budget.ok_or_else(|| ModelError::BadProfile("missing cpu_budget".into()))?,
            mem_budget: mem_budget.ok_or_else(|| ModelError::BadProfile("missing mem_budget".into()))?,
            required_capabilities: required,
        })
    }

    pub fn to_profile_text(&self) -> String {
        let caps: Vec<&str> = self.required_capabilities.iter().map(|c| c.as_str()).collect();
        format!(
            "node_id={}\nnode_class={:?}\ncpu_budget={}\nmem_budget={}\nrequired_capabilities={}\n",
            self.node_id,
            self.node_class,
            self.cpu_budget,
            self.mem_budget,
            caps.join(",")
        )
    }

    pub fn is_admissible(&self) -> bool {
        !self.required_capabilities.is_empty()
    }
}

/// A catalog entry: one security component offered as a service.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecurityComponentDescriptor {
    pub component_id: String,
    pub version: u64,
    pub capabilities: BTreeSet<CapabilityTag>,
    pub cpu_cost: u64,
    pub mem_cost: u64,
    pub public_key: PublicKey,
}

impl SecurityComponentDescriptor {
    pub fn total_cost(&self) -> u64 {
        self.cpu_cost + self.mem_cost
    }
}

/// Boot-time self check of the core image.
pub fn core_image_intact(stack: &LayerStack, publisher_pk: &PublicKey) -> bool {
    check_integrity(&stack.core_image, publisher_pk)
}
