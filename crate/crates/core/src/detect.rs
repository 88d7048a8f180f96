//! Security components consulted by the guard. Both detectors only ever see
//! [`Observation`]s, never the guest itself.

use std::collections::HashSet;
use std::fmt;

use memchr::memmem;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CapabilityTag, Resource};
use crate::Tick;

pub const MIN_PATTERN_LEN: usize = 4;
pub const DEFAULT_ANOMALY_THRESHOLD: f64 = 7.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectError {
    #[error("ruleset line {line}: {reason}")]
    BadRule { line: usize, reason: String },
    #[error("anomaly threshold {0} outside (0, 8]")]
    BadThreshold(f64),
}

/// Data measured by the guard from a running guest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub vm_id: String,
    pub tick: Tick,
    pub resource: Resource,
    #[serde(with = "hex::serde")]
    pub data: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignatureRule {
    pub rule_id: String,
    #[serde(with = "hex::serde")]
    pub pattern: Vec<u8>,
    pub description: String,
}

/// Ordered rules; order decides which rule a verdict names.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ruleset {
    rules: Vec<SignatureRule>,
}

impl Ruleset {
    pub fn new(rules: Vec<SignatureRule>) -> Result<Self, DetectError> {
        let mut ids = HashSet::new();
        for (i, r) in rules.iter().enumerate() {
            if r.pattern.len() < MIN_PATTERN_LEN {
                return Err(DetectError::BadRule {
                    line: i + 1,
                    reason: format!("pattern of {} bytes is shorter than {MIN_PATTERN_LEN}", r.pattern.len()),
                });
            }
            if r.rule_id.is_empty() || !ids.insert(r.rule_id.as_str()) {
                return Err(DetectError::BadRule {
                    line: i + 1,
                    reason: format!("empty or duplicate rule id {:?}", r.rule_id),
                });
            }
        }
        Ok(Self { rules })
    }

    pub fn rules(&self) -> &[SignatureRule] {
        &self.rules
    }

    pub fn get(&self, rule_id: &str) -> Option<&SignatureRule> {
        self.rules.iter().find(|r| r.rule_id == rule_id)
    }

    /// Parses `rule_id<TAB>hex_pattern<TAB>description` lines. Blank lines
    /// and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, DetectError> {
        let mut rules = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: &str| DetectError::BadRule {
                line: n + 1,
                reason: reason.to_string(),
            };
            let mut fields = line.splitn(3, '\t');
            let rule_id = fields.next().unwrap_or_default();
            let hex_pattern = fields.next().ok_or_else(|| bad("missing pattern"))?;
            let description = fields.next().unwrap_or_default();
            let pattern = hex::decode(hex_pattern).map_err(|_| bad("pattern is not hex"))?;
            rules.push(SignatureRule {
                rule_id: rule_id.to_string(),
                pattern,
                description: description.to_string(),
            });
        }
        Self::new(rules)
    }

    pub fn to_text(&self) -> String {
        self.rules
            .iter()
            .map(|r| format!("{}\t{}\t{}\n", r.rule_id, hex::encode(&r.pattern), r.description))
            .collect()
    }
}

/// Why a component flagged a guest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Cause {
    Rule(String),
    Anomaly(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Verdict {
    Clean,
    Infected(Cause),
}

impl Verdict {
    pub fn is_infected(&self) -> bool {
        matches!(self, Verdict::Infected(_))
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Clean => f.write_str("clean"),
            Verdict::Infected(Cause::Rule(id)) => write!(f, "infected:rule:{id}"),
            Verdict::Infected(Cause::Anomaly(score)) => write!(f, "infected:anomaly:{score:.4}"),
        }
    }
}

/// The first rule (in ruleset order) whose pattern occurs anywhere in the
/// observed data.
pub fn signature_scan(observation: &Observation, ruleset: &Ruleset) -> Verdict {
    ruleset
        .rules
        .iter()
        .find(|r| memmem::find(&observation.data, &r.pattern).is_some())
        .map(|r| Verdict::Infected(Cause::Rule(r.rule_id.clone())))
        .unwrap_or(Verdict::Clean)
}

/// Shannon entropy of the byte histogram, in bits per byte (0 for empty).
pub fn byte_entropy(data: &[u8]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let mut counts = [0u64; 256];
    for b in data {
        counts[*b as usize] += 1;
    }
    let n = data.len() as f64;
    counts
        .iter()
        .filter(|c| **c > 0)
        .map(|c| {
            let p = *c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyThreshold(f64);

impl AnomalyThreshold {
    pub fn new(bits_per_byte: f64) -> Result<Self, DetectError> {
        if bits_per_byte > 0.0 && bits_per_byte <= 8.0 {
            Ok(Self(bits_per_byte))
        } else {
            Err(DetectError::BadThreshold(bits_per_byte))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for AnomalyThreshold {
    fn default() -> Self {
        Self(DEFAULT_ANOMALY_THRESHOLD)
    }
}

pub fn anomaly_scan(observation: &Observation, threshold: AnomalyThreshold) -> Verdict {
    let score = byte_entropy(&observation.data);
    if score > threshold.0 {
        Verdict::Infected(Cause::Anomaly(score))
    } else {
        Verdict::Clean
    }
}

/// The detectors a capability maps onto, and the resource each reads.
/// Firewall filtering is a signature scan over the network tap.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Detector {
    Signature,
    Anomaly,
}

pub fn detectors_for(capability: &CapabilityTag) -> &'static [(Detector, Resource)] {
    match capability.as_str() {
        CapabilityTag::SIGNATURE_SCAN => &[
            (Detector::Signature, Resource::GuestMemory),
            (Detector::Signature, Resource::GuestDisk),
        ],
        CapabilityTag::ANOMALY_SCAN => &[(Detector::Anomaly, Resource::GuestMemory)],
        CapabilityTag::FIREWALL_FILTER => &[(Detector::Signature, Resource::NetworkTap)],
        _ => &[],
    }
}
