//! Seeded generators for the randomized suites, plus the comparisons
//! against the oracles in the parent module.

use std::collections::BTreeSet;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vsoa::crypto::{AccessToken, Credential, CustodyAction, CustodyRecord, KeyOwner, Pki};
use vsoa::detect::{signature_scan, Cause, Observation, Ruleset, SignatureRule, Verdict};
use vsoa::evidence::{EvidenceBundle, EvidenceMeta};
use vsoa::model::{CapabilityTag, NodeClass, NodeProfile, Resource, SecurityComponentDescriptor, VmImage, VmKind};
use vsoa::server::{select_components, SelectError};
use vsoa::sim::{run_scenario, Injection, Scenario};
use vsoa::wire::{encode_frame, DenyReason, Envelope, GuestAttestation, ProtocolMessage, StackAttestation};
use vsoa::{Digest, PublicKey, Signature};

pub struct Gen(pub ChaCha8Rng);

impl Gen {
    pub fn bytes(&mut self, max: usize) -> Vec<u8> {
        let n = self.0.random_range(0..=max);
        (0..n).map(|_| self.0.random()).collect()
    }

    /// Includes quotes, backslashes, control and non-ASCII characters.
    pub fn string(&mut self) -> String {
        const POOL: &[char] = &[
            'a', 'z', '0', '-', '"', '\\', '\n', '\t', '\u{1}', 'é', '漢', '🦀', ' ', '=',
        ];
        let n = self.0.random_range(0..12);
        (0..n).map(|_| POOL[self.0.random_range(0..POOL.len())]).collect()
    }

    pub fn u64(&mut self) -> u64 {
        match self.0.random_range(0..3) {
            0 => self.0.random_range(0..10),
            1 => u64::MAX - self.0.random_range(0..10),
            _ => self.0.random(),
        }
    }

    pub fn digest(&mut self) -> Digest {
        Digest::from_bytes(self.0.random())
    }

    pub fn sig(&mut self) -> Signature {
        Signature::from_bytes(self.bytes(64))
    }

    pub fn pk(&mut self) -> PublicKey {
        PublicKey::from_bytes(self.bytes(32))
    }

    pub fn owner(&mut self) -> KeyOwner {
        match self.0.random_range(0..4) {
            0 => KeyOwner::Server,
            1 => KeyOwner::Publisher,
            2 => KeyOwner::Node(self.string()),
            _ => KeyOwner::Component(self.string()),
        }
    }

    pub fn credential(&mut self) -> Credential {
        Credential {
            owner: self.owner(),
            public_key: self.pk(),
            certificate: self.sig(),
        }
    }

    pub fn list<T>(&mut self, max: usize, mut f: impl FnMut(&mut Self) -> T) -> Vec<T> {
        let n = self.0.random_range(0..=max);
        (0..n).map(|_| f(self)).collect()
    }

    pub fn image(&mut self) -> VmImage {
        VmImage {
            image_id: self.string(),
            kind: if self.0.random() {
                VmKind::GuestOs
            } else {
                VmKind::SecurityEnv
            },
            payload: self.bytes(64),
            content_hash: self.digest(),
            signature: self.sig(),
            app_manifest: self.list(3, Gen::string),
        }
    }

    pub fn caps(&mut self) -> BTreeSet<CapabilityTag> {
        self.list(3, |g| CapabilityTag::new(g.string())).into_iter().collect()
    }

    pub fn component(&mut self) -> SecurityComponentDescriptor {
        SecurityComponentDescriptor {
            component_id: self.string(),
            version: self.u64(),
            capabilities: self.caps(),
            cpu_cost: self.u64(),
            mem_cost: self.u64(),
            public_key: self.pk(),
        }
    }

    pub fn resource(&mut self) -> Resource {
        Resource::ALL[self.0.random_range(0..3)]
    }

    pub fn token(&mut self) -> AccessToken {
        AccessToken {
            component_id: self.string(),
            resource: self.resource(),
            expiry_tick: self.u64(),
            signature: self.sig(),
        }
    }

    pub fn verdict(&mut self) -> Verdict {
        match self.0.random_range(0..3) {
            0 => Verdict::Clean,
            1 => Verdict::Infected(Cause::Rule(self.string())),
            _ => Verdict::Infected(Cause::Anomaly(self.0.random_range(0.0..8.0))),
        }
    }

    pub fn custody(&mut self) -> CustodyRecord {
        let actions = [
            CustodyAction::Snapshotted,
            CustodyAction::Transferred,
            CustodyAction::Stored,
            CustodyAction::Analyzed,
        ];
        CustodyRecord {
            actor: self.credential(),
            action: actions[self.0.random_range(0..4)],
            tick: self.u64(),
            prev_hash: self.digest(),
            signature: self.sig(),
        }
    }

    pub fn message(&mut self) -> ProtocolMessage {
        match self.0.random_range(0..10) {
            0 => ProtocolMessage::JoinRequest {
                node_id: self.string(),
                profile: NodeProfile {
                    node_id: self.string(),
                    node_class: [NodeClass::Desktop, NodeClass::ThinClient, NodeClass::MobileHandheld]
                        [self.0.random_range(0..3)],
                    cpu_budget: self.u64(),
                    mem_budget: self.u64(),
                    required_capabilities: self.caps(),
                },
                stack_attestation: StackAttestation {
                    node: self.credential(),
                    hardware_id: self.string(),
                    core_image_id: self.string(),
                    core_hash: self.digest(),
                    core_signature: self.sig(),
                    guests: self.list(3, |g| GuestAttestation {
                        vm_id: g.string(),
                        image_id: g.string(),
                        image_hash: g.digest(),
                        app_manifest: g.list(2, Gen::string),
                    }),
                    signature: self.sig(),
                },
            },
            1 => ProtocolMessage::ProvisionVm {
                security_image: self.image(),
                component_set: self.list(3, Gen::component),
                tokens: self.list(4, Gen::token),
            },
            2 => ProtocolMessage::AttestationReport {
                node_id: self.string(),
                security_vm_hash: self.digest(),
                signature: self.sig(),
            },
            3 => ProtocolMessage::AccessGrant {
                node_id: self.string(),
                lease_ticks: self.u64(),
            },
            4 => {
                let reasons = [
                    DenyReason::UnknownKey,
                    DenyReason::BadSignature,
                    DenyReason::IntegrityFailure,
                    DenyReason::InvalidProfile,
                    DenyReason::InfeasibleProfile,
                    DenyReason::NotProvisioned,
                    DenyReason::SecurityVmMismatch,
                    DenyReason::NotAdmitted,
                    DenyReason::UnknownManifest,
                    DenyReason::CustodyBroken,
                ];
                ProtocolMessage::AccessDenied {
                    node_id: self.string(),
                    reason: reasons[self.0.random_range(0..reasons.len())],
                }
            }
            5 => ProtocolMessage::InfectionReport {
                node_id: self.string(),
                vm_id: self.string(),
                verdict: self.verdict(),
            },
            6 => ProtocolMessage::EvidenceTransfer {
                bundle: EvidenceBundle {
                    snapshot: self.bytes(128),
                    meta: EvidenceMeta {
                        node_id: self.string(),
                        vm_id: self.string(),
                        halt_tick: self.u64(),
                        verdict: self.verdict(),
                        app_manifest: self.list(2, Gen::string),
                        snapshot_hash: self.digest(),
                    },
                    custody: self.list(4, Gen::custody),
                },
            },
            7 => ProtocolMessage::CleanVmDelivery {
                vm_id: self.string(),
                guest_image: self.image(),
            },
            8 => ProtocolMessage::ComponentUpdate {
                security_image: self.image(),
                component_set: self.list(3, Gen::component),
                tokens: self.list(4, Gen::token),
            },
            _ => ProtocolMessage::Ack { ref_id: self.string() },
        }
    }

    pub fn envelope(&mut self) -> Envelope {
        Envelope {
            sender: self.string(),
            seq: self.u64(),
            tick: self.u64(),
            reply_to: if self.0.random() { Some(self.u64()) } else { None },
            body: self.message(),
        }
    }
}

pub fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/single_node_transcript.bin")
}

/// Frames of the single-node infection session, in transport order.
pub fn session_transcript_bytes() -> Vec<u8> {
    let mut sc = Scenario::new(42, 1, 10);
    sc.detector_latency = 2;
    sc.injections.push(Injection {
        tick: 5,
        node: "n0".into(),
        pattern: "worm-a".into(),
        vm: "g0".into(),
    });
    let out = run_scenario(&sc).unwrap();
    out.transcript
        .iter()
        .flat_map(|e| encode_frame(&e.envelope).unwrap())
        .collect()
}

const TAGS: [&str; 5] = ["SignatureScan", "AnomalyScan", "FirewallFilter", "Sandbox", "Backup"];

pub fn random_catalog(rng: &mut ChaCha8Rng, n: usize, pki: &Pki) -> Vec<SecurityComponentDescriptor> {
    (0..n)
        .map(|i| {
            let mut caps = BTreeSet::new();
            while caps.is_empty() {
                for t in TAGS {
                    if rng.random_bool(0.3) {
                        caps.insert(CapabilityTag::new(t));
                    }
                }
            }
            // Few distinct costs so ties actually happen.
            let id = format!("{}{i:02}", (b'a' + rng.random_range(0..26u8)) as char);
            SecurityComponentDescriptor {
                public_key: pki.component(&id).public_key().clone(),
                component_id: id,
                version: 1,
                capabilities: caps,
                cpu_cost: rng.random_range(0..4) * 5,
                mem_cost: rng.random_range(0..4) * 5,
            }
        })
        .collect()
}

pub fn random_profile(rng: &mut ChaCha8Rng) -> NodeProfile {
    let mut required = BTreeSet::new();
    while required.is_empty() {
        for t in TAGS {
            if rng.random_bool(0.4) {
                required.insert(CapabilityTag::new(t));
            }
        }
    }
    NodeProfile {
        node_id: "n0".into(),
        node_class: NodeClass::Desktop,
        cpu_budget: rng.random_range(0..40),
        mem_budget: rng.random_range(0..40),
        required_capabilities: required,
    }
}

/// Runs `profiles` random profiles, each against a fresh catalog of
/// 1..=max_n components. Returns (feasible, infeasible) counts.
pub fn agree_with_brute_force(seed: u64, profiles: usize, max_n: usize) -> (usize, usize) {
    let pki = Pki::from_seed(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut feasible, mut infeasible) = (0, 0);
    for _ in 0..profiles {
        let n = rng.random_range(1..=max_n);
        let catalog = random_catalog(&mut rng, n, &pki);
        let profile = random_profile(&mut rng);
        let oracle = super::brute_force_select(&profile, &catalog);
        match (select_components(&profile, &catalog), oracle) {
            (Ok(set), Some(ids)) => {
                let got: Vec<String> = set.iter().map(|c| c.component_id.clone()).collect();
                let mut sorted = got.clone();
                sorted.sort();
                assert_eq!(sorted, ids, "profile {profile:?}\ncatalog {catalog:?}");
                assert!(super::covers(&profile, &set));
                feasible += 1;
            }
            (Err(SelectError::InfeasibleProfile), None) => infeasible += 1,
            (got, want) => {
                panic!("disagreement: got {got:?}, oracle {want:?}\nprofile {profile:?}\ncatalog {catalog:?}")
            }
        }
    }
    (feasible, infeasible)
}

pub fn obs(data: Vec<u8>) -> Observation {
    Observation {
        vm_id: "g0".into(),
        tick: 0,
        resource: Resource::GuestMemory,
        data,
    }
}

pub fn ruleset(rules: &[(String, Vec<u8>)]) -> Ruleset {
    Ruleset::new(
        rules
            .iter()
            .map(|(id, p)| SignatureRule {
                rule_id: id.clone(),
                pattern: p.clone(),
                description: String::new(),
            })
            .collect(),
    )
    .unwrap()
}

/// Small alphabet so that random data and patterns overlap often.
pub fn scan_instance(rng: &mut ChaCha8Rng) -> (Vec<u8>, Vec<(String, Vec<u8>)>) {
    let alphabet = rng.random_range(2u8..=4);
    let mut data: Vec<u8> = (0..rng.random_range(0..200))
        .map(|_| rng.random_range(0..alphabet))
        .collect();
    let rules: Vec<(String, Vec<u8>)> = (0..rng.random_range(1..6))
        .map(|i| {
            let len = rng.random_range(4..9);
            (
                format!("r{i}"),
                (0..len).map(|_| rng.random_range(0..alphabet)).collect(),
            )
        })
        .collect();
    if rng.random_bool(0.5) && !rules.is_empty() {
        let (_, p) = &rules[rng.random_range(0..rules.len())];
        let at = rng.random_range(0..=data.len());
        data.splice(at..at, p.iter().copied());
    }
    (data, rules)
}

/// Compares `signature_scan` with the naive oracle on `n` instances.
/// Returns how many were infected.
pub fn scan_agreement(seed: u64, n: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut infected = 0;
    for _ in 0..n {
        let (data, rules) = scan_instance(&mut rng);
        let expected = super::naive_scan(&data, &rules).map(str::to_string);
        let got = match signature_scan(&obs(data), &ruleset(&rules)) {
            Verdict::Clean => None,
            Verdict::Infected(Cause::Rule(id)) => Some(id),
            other => panic!("unexpected {other:?}"),
        };
        infected += got.is_some() as usize;
        assert_eq!(got, expected);
    }
    infected
}
