//! Virtualized network security with security components delivered as services.
//!
//! Every node runs a small layer stack: a signed core image (kernel plus
//! hypervisor), guest VMs, and one security VM. A security server attests
//! joining nodes, selects the component set that fits each node's budget,
//! and provisions the security VM together with key-gated access tokens.
//! When a component flags a guest as infected the node halts it, snapshots
//! it into a content-addressed evidence bundle with a signed chain of
//! custody, ships the bundle to the server and receives a clean replacement.
//!
//! The [`sim`] module wires one server and many agents over an in-memory
//! transport and produces a deterministic trace; [`net`] runs the same
//! server and agent code over TCP.

pub mod agent;
pub mod canonical;
pub mod crypto;
pub mod detect;
pub mod evidence;
pub mod fixtures;
pub mod journal;
pub mod model;
pub mod net;
pub mod server;
pub mod sim;
pub mod wire;

pub use crypto::{hash_content, Digest, KeyOwner, KeyPair, Pki, PublicKey, Signature};
pub use model::{
    CapabilityTag, LayerStack, NodeClass, NodeProfile, Resource, SecurityComponentDescriptor, VmEvent, VmImage,
    VmInstance, VmKind, VmState,
};

/// Logical simulation time.
pub type Tick = u64;
