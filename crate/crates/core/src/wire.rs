//! Node/server message vocabulary, canonical encoding and framing.
//!
//! A frame is a 4-byte big-endian length followed by the canonical bytes of
//! one [`Envelope`]. See `docs/wire-protocol.md` for a byte-level transcript.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{verifies, AccessToken, Credential, Digest, Identity, PublicKey, Signature};
use crate::detect::Verdict;
use crate::evidence::EvidenceBundle;
use crate::model::{LayerStack, NodeProfile, SecurityComponentDescriptor, VmImage};
use crate::Tick;

pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;
const LEN_PREFIX: usize = 4;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("incomplete frame: have {have} bytes, need {need}")]
    IncompleteFrame { have: usize, need: usize },
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
    #[error("frame of {len} bytes exceeds maximum {max}")]
    OversizeFrame { len: usize, max: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Why the server refused a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DenyReason {
    UnknownKey,
    BadSignature,
    IntegrityFailure,
    InvalidProfile,
    InfeasibleProfile,
    NotProvisioned,
    SecurityVmMismatch,
    NotAdmitted,
    UnknownManifest,
    CustodyBroken,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuestAttestation {
    pub vm_id: String,
    pub image_id: String,
    pub image_hash: Digest,
    pub app_manifest: Vec<String>,
}

/// The node's signed statement of what it runs, checked by the server
/// before anything is provisioned.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackAttestation {
    pub node: Credential,
    pub hardware_id: String,
    pub core_image_id: String,
    /// Hash recomputed by the node over its core payload.
    pub core_hash: Digest,
    /// Publisher signature shipped with the core image.
    pub core_signature: Signature,
    pub guests: Vec<GuestAttestation>,
    pub signature: Signature,
}

#[derive(Serialize)]
struct AttestationBody<'a> {
    purpose: &'static str,
    node: &'a Credential,
    hardware_id: &'a str,
    core_image_id: &'a str,
    core_hash: Digest,
    core_signature: &'a Signature,
    guests: &'a [GuestAttestation],
}

impl StackAttestation {
    pub fn measure(stack: &LayerStack, identity: &Identity) -> Self {
        let guests = stack
            .guest_vms
            .iter()
            .filter(|vm| !vm.state().is_stopped())
            .map(|vm| GuestAttestation {
                vm_id: vm.vm_id.clone(),
                image_id: vm.image.image_id.clone(),
                image_hash: vm.image.content_hash,
                app_manifest: vm.image.app_manifest.clone(),
            })
            .collect();
        let mut att = Self {
            node: identity.credential.clone(),
            hardware_id: stack.hardware_id.clone(),
            core_image_id: stack.core_image.image_id.clone(),
            core_hash: crate::crypto::hash_content(&stack.core_image.payload),
            core_signature: stack.core_image.signature.clone(),
            guests,
            signature: Signature::from_bytes(Vec::new()),
        };
        att.signature = identity.sign(&att.signed_bytes());
        att
    }

    pub fn signed_bytes(&self) -> Vec<u8> {
        crate::canonical::to_bytes(&AttestationBody {
            purpose: "stack-attestation",
            node: &self.node,
            hardware_id: &self.hardware_id,
            core_image_id: &self.core_image_id,
            core_hash: self.core_hash,
            core_signature: &self.core_signature,
            guests: &self.guests,
        })
    }

    pub fn signature_valid(&self) -> bool {
        verifies(&self.node.public_key, &self.signed_bytes(), &self.signature)
    }
}

#[derive(Serialize)]
struct ReportBody<'a> {
    purpose: &'static str,
    node_id: &'a str,
    security_vm_hash: Digest,
}

/// Bytes a node signs to attest its running security VM.
pub fn attestation_report_bytes(node_id: &str, security_vm_hash: Digest) -> Vec<u8> {
    crate::canonical::to_bytes(&ReportBody {
        purpose: "security-vm-attestation",
        node_id,
        security_vm_hash,
    })
}

pub fn attestation_report_valid(
    node_pk: &PublicKey,
    node_id: &str,
    security_vm_hash: Digest,
    signature: &Signature,
) -> bool {
    verifies(node_pk, &attestation_report_bytes(node_id, security_vm_hash), signature)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum ProtocolMessage {
    JoinRequest {
        node_id: String,
        profile: NodeProfile,
        stack_attestation: StackAttestation,
    },
    ProvisionVm {
        security_image: VmImage,
        component_set: Vec<SecurityComponentDescriptor>,
        tokens: Vec<AccessToken>,
    },
    AttestationReport {
        node_id: String,
        security_vm_hash: Digest,
        signature: Signature,
    },
    AccessGrant {
        node_id: String,
        lease_ticks: Tick,
    },
    AccessDenied {
        node_id: String,
        reason: DenyReason,
    },
    InfectionReport {
        node_id: String,
        vm_id: String,
        verdict: Verdict,
    },
    EvidenceTransfer {
        bundle: EvidenceBundle,
    },
    CleanVmDelivery {
        /// The quarantined VM this image replaces.
        vm_id: String,
        guest_image: VmImage,
    },
    ComponentUpdate {
        security_image: VmImage,
        component_set: Vec<SecurityComponentDescriptor>,
        tokens: Vec<AccessToken>,
    },
    Ack {
        ref_id: String,
    },
}

impl ProtocolMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            ProtocolMessage::JoinRequest { .. } => "JoinRequest",
            ProtocolMessage::ProvisionVm { .. } => "ProvisionVm",
            ProtocolMessage::AttestationReport { .. } => "AttestationReport",
            ProtocolMessage::AccessGrant { .. } => "AccessGrant",
            ProtocolMessage::AccessDenied { .. } => "AccessDenied",
            ProtocolMessage::InfectionReport { .. } => "InfectionReport",
            ProtocolMessage::EvidenceTransfer { .. } => "EvidenceTransfer",
            ProtocolMessage::CleanVmDelivery { .. } => "CleanVmDelivery",
            ProtocolMessage::ComponentUpdate { .. } => "ComponentUpdate",
            ProtocolMessage::Ack { .. } => "Ack",
        }
    }
}

/// Transport wrapper: sender, per-sender sequence number, the sender's
/// clock, and the request this answers (if any).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub sender: String,
    pub seq: u64,
    pub tick: Tick,
    pub reply_to: Option<u64>,
    pub body: ProtocolMessage,
}

pub fn canonical_bytes<T: Serialize + ?Sized>(message: &T) -> Vec<u8> {
    crate::canonical::to_bytes(message)
}

#[derive(Clone, Copy, Debug)]
pub struct FrameCodec {
    pub max_frame_len: usize,
}

impl Default for FrameCodec {
    fn default() -> Self {
        Self {
            max_frame_len: MAX_FRAME_LEN,
        }
    }
}

impl FrameCodec {
    pub fn encode<T: Serialize + ?Sized>(&self, message: &T) -> Result<Vec<u8>, WireError> {
        let body = canonical_bytes(message);
        if body.len() > self.max_frame_len {
            return Err(WireError::OversizeFrame {
                len: body.len(),
                max: self.max_frame_len,
            });
        }
        let mut out = Vec::with_capacity(LEN_PREFIX + body.len());
        out.extend_from_slice(&(body.len() as u32).to_be_bytes());
        out.extend_from_slice(&body);
        Ok(out)
    }

    /// Decodes the first frame and returns the bytes after it.
    pub fn decode<'a, T: DeserializeOwned>(&self, bytes: &'a [u8]) -> Result<(T, &'a [u8]), WireError> {
        let len = self.frame_len(bytes)?;
        let end = LEN_PREFIX + len;
        let message = crate::canonical::from_bytes(&bytes[LEN_PREFIX..end])
            .map_err(|e| WireError::MalformedPayload(e.to_string()))?;
        Ok((message, &bytes[end..]))
    }

    fn frame_len(&self, bytes: &[u8]) -> Result<usize, WireError> {
        if bytes.len() < LEN_PREFIX {
            return Err(WireError::IncompleteFrame {
                have: bytes.len(),
                need: LEN_PREFIX,
            });
        }
        let len = u32::from_be_bytes(bytes[..LEN_PREFIX].try_into().unwrap()) as usize;
        if len > self.max_frame_len {
            return Err(WireError::OversizeFrame {
                len,
                max: self.max_frame_len,
            });
        }
        if bytes.len() < LEN_PREFIX + len {
            return Err(WireError::IncompleteFrame {
                have: bytes.len(),
                need: LEN_PREFIX + len,
            });
        }
        Ok(len)
    }

    pub fn write<W: Write, T: Serialize + ?Sized>(&self, w: &mut W, message: &T) -> Result<(), WireError> {
        w.write_all(&self.encode(message)?)?;
        w.flush()?;
        Ok(())
    }

    /// Reads one frame. `Ok(None)` on a clean end of stream between frames.
    pub fn read<R: Read, T: DeserializeOwned>(&self, r: &mut R) -> Result<Option<T>, WireError> {
        let mut prefix = [0u8; LEN_PREFIX];
        let mut filled = 0;
        while filled < LEN_PREFIX {
            match r.read(&mut prefix[filled..])? {
                0 if filled == 0 => return Ok(None),
                0 => {
                    return Err(WireError::IncompleteFrame {
                        have: filled,
                        need: LEN_PREFIX,
                    })
                }
                n => filled += n,
            }
        }
        let len = u32::from_be_bytes(prefix) as usize;
        if len > self.max_frame_len {
            return Err(WireError::OversizeFrame {
                len,
                max: self.max_frame_len,
            });
        }
        let mut body = vec![0u8; len];
        r.read_exact(&mut body)?;
        crate::canonical::from_bytes(&body)
            .map(Some)
            .map_err(|e| WireError::MalformedPayload(e.to_string()))
    }
}

pub fn encode_frame<T: Serialize + ?Sized>(message: &T) -> Result<Vec<u8>, WireError> {
    FrameCodec::default().encode(message)
}

pub fn decode_frame<T: DeserializeOwned>(bytes: &[u8]) -> Result<(T, &[u8]), WireError> {
    FrameCodec::default().decode(bytes)
}

/// True if every sender's sequence numbers strictly increase.
pub fn sequences_increasing<'a>(transcript: impl IntoIterator<Item = &'a Envelope>) -> bool {
    let mut last: BTreeMap<&str, u64> = BTreeMap::new();
    for env in transcript {
        if let Some(prev) = last.insert(&env.sender, env.seq) {
            if env.seq <= prev {
                return false;
            }
        }
    }
    true
}
