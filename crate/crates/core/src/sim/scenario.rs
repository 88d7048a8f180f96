//! Scenario files. TOML, one scenario per file; every field except `seed`,
//! `num_nodes` and `max_ticks` has a default.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::Pki;
use crate::detect::{AnomalyThreshold, Ruleset, SignatureRule};
use crate::fixtures;
use crate::model::{CapabilityTag, NodeClass, NodeProfile, SecurityComponentDescriptor};
use crate::Tick;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario field {field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("scenario run failed: {0}")]
    Runtime(String),
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    #[default]
    Complete,
    /// Directed: node i reaches node i+1 (mod n) only.
    Ring,
    /// n0 is the hub.
    Star,
}

impl Topology {
    pub fn neighbors(self, i: usize, n: usize) -> Vec<usize> {
        match self {
            Topology::Complete => (0..n).filter(|j| *j != i).collect(),
            Topology::Ring if n > 1 => vec![(i + 1) % n],
            Topology::Ring => Vec::new(),
            Topology::Star if i == 0 => (1..n).collect(),
            Topology::Star => vec![0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSpec {
    #[serde(default = "default_class")]
    pub node_class: NodeClass,
    pub cpu_budget: u64,
    pub mem_budget: u64,
    pub required_capabilities: Vec<String>,
}

fn default_class() -> NodeClass {
    NodeClass::Desktop
}

impl ProfileSpec {
    pub fn to_profile(&self, node_id: &str) -> NodeProfile {
        NodeProfile {
            node_id: node_id.to_string(),
            node_class: self.node_class,
            cpu_budget: self.cpu_budget,
            mem_budget: self.mem_budget,
            required_capabilities: self.required_capabilities.iter().map(CapabilityTag::new).collect(),
        }
    }
}

/// Ways a node's stack or key can be compromised before it boots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tamper {
    /// Core payload altered; the node's own self-check catches it.
    Core,
    /// Core payload altered and the self-check skipped; the server has to
    /// catch it.
    ForgedCore,
    /// Node key not issued by the deployment's publisher.
    RogueKey,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub profile: Option<ProfileSpec>,
    pub tamper: Option<Tamper>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSpec {
    pub id: String,
    /// Hex-encoded bytes.
    pub pattern: String,
    #[serde(default)]
    pub description: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub id: String,
    #[serde(default = "one")]
    pub version: u64,
    pub capabilities: Vec<String>,
    pub cpu_cost: u64,
    pub mem_cost: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Injection {
    pub tick: Tick,
    pub node: String,
    /// Rule id whose pattern is appended to the guest.
    pub pattern: String,
    #[serde(default = "first_guest")]
    pub vm: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpdateSpec {
    pub tick: Tick,
    pub node: String,
    pub components: Vec<String>,
}

fn one() -> u64 {
    1
}

fn one_usize() -> usize {
    1
}

fn first_guest() -> String {
    "g0".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub num_nodes: usize,
    pub max_ticks: Tick,
    #[serde(default)]
    pub propagation_probability: f64,
    #[serde(default)]
    pub detector_latency: Tick,
    #[serde(default = "one")]
    pub provisioning_delay: Tick,
    #[serde(default)]
    pub topology: Topology,
    #[serde(default = "one_usize")]
    pub guests_per_node: usize,
    #[serde(default)]
    pub anomaly_threshold: Option<f64>,
    #[serde(default)]
    pub lease_ticks: Option<Tick>,
    /// Profile for every node without its own.
    #[serde(default)]
    pub profile: Option<ProfileSpec>,
    #[serde(default)]
    pub nodes: BTreeMap<String, NodeSpec>,
    #[serde(default)]
    pub rules: Vec<RuleSpec>,
    #[serde(default)]
    pub components: Vec<ComponentSpec>,
    #[serde(default)]
    pub injections: Vec<Injection>,
    /// Ticks on which the server answers nothing.
    #[serde(default)]
    pub server_down: Vec<Tick>,
    #[serde(default)]
    pub updates: Vec<UpdateSpec>,
}

impl Scenario {
    /// A scenario with every optional field at its default.
    pub fn new(seed: u64, num_nodes: usize, max_ticks: Tick) -> Self {
        Self {
            seed,
            num_nodes,
            max_ticks,
            propagation_probability: 0.0,
            detector_latency: 0,
            provisioning_delay: 1,
            topology: Topology::Complete,
            guests_per_node: 1,
            anomaly_threshold: None,
            lease_ticks: None,
            profile: None,
            nodes: BTreeMap::new(),
            rules: Vec::new(),
            components: Vec::new(),
            injections: Vec::new(),
            server_down: Vec::new(),
            updates: Vec::new(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenarios serialize")
    }

    pub fn node_id(i: usize) -> String {
        format!("n{i}")
    }

    pub fn node_index(&self, node_id: &str) -> Option<usize> {
        node_id
            .strip_prefix('n')
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|i| *i < self.num_nodes && Self::node_id(*i) == node_id)
    }

    pub fn ruleset(&self) -> Result<Ruleset, ScenarioError> {
        if self.rules.is_empty() {
            return Ok(fixtures::default_ruleset());
        }
        let mut rules = Vec::new();
        for (i, r) in self.rules.iter().enumerate() {
            rules.push(SignatureRule {
                rule_id: r.id.clone(),
                pattern: hex::decode(&r.pattern).map_err(|e| invalid(format!("rules[{i}].pattern"), e.to_string()))?,
                description: r.description.clone(),
            });
        }
        Ruleset::new(rules).map_err(|e| invalid("rules", e.to_string()))
    }

    pub fn components(&self, pki: &Pki) -> Vec<SecurityComponentDescriptor> {
        if self.components.is_empty() {
            return fixtures::default_components(pki);
        }
        self.components
            .iter()
            .map(|c| SecurityComponentDescriptor {
                component_id: c.id.clone(),
                version: c.version,
                capabilities: c.capabilities.iter().map(CapabilityTag::new).collect(),
                cpu_cost: c.cpu_cost,
                mem_cost: c.mem_cost,
                public_key: pki.component(&c.id).public_key().clone(),
            })
            .collect()
    }

    pub fn profile_for(&self, node_id: &str) -> NodeProfile {
        self.nodes
            .get(node_id)
            .and_then(|n| n.profile.as_ref())
            .or(self.profile.as_ref())
            .map(|p| p.to_profile(node_id))
            .unwrap_or_else(|| fixtures::default_profile(node_id))
    }

    pub fn threshold(&self) -> Result<AnomalyThreshold, ScenarioError> {
        match self.anomaly_threshold {
            None => Ok(AnomalyThreshold::default()),
            Some(t) => AnomalyThreshold::new(t).map_err(|e| invalid("anomaly_threshold", e.to_string())),
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.num_nodes == 0 {
            return Err(invalid("num_nodes", "must be at least 1"));
        }
        let p = self.propagation_probability;
        if !(0.0..=1.0).contains(&p) {
            return Err(invalid("propagation_probability", format!("{p} is outside [0, 1]")));
        }
        if self.guests_per_node == 0 {
            return Err(invalid("guests_per_node", "must be at least 1"));
        }
        if self.lease_ticks == Some(0) {
            return Err(invalid("lease_ticks", "must be positive"));
        }
        self.threshold()?;
        let ruleset = self.ruleset()?;
        let component_ids: BTreeSet<&str> = if self.components.is_empty() {
            ["av-full", "av-lite", "ids-entropy", "fw-filter", "fw-ids"].into()
        } else {
            let mut ids = BTreeSet::new();
            for c in &self.components {
                if !ids.insert(c.id.as_str()) {
                    return Err(invalid("components", format!("duplicate id {}", c.id)));
                }
                if c.capabilities.is_empty() {
                    return Err(invalid("components", format!("{} has no capabilities", c.id)));
                }
            }
            ids
        };
        for id in self.nodes.keys() {
            if self.node_index(id).is_none() {
                return Err(invalid(format!("nodes.{id}"), "no such node"));
            }
        }
        for (i, inj) in self.injections.iter().enumerate() {
            let field = |f: &str| format!("injections[{i}].{f}");
            if self.node_index(&inj.node).is_none() {
                return Err(invalid(field("node"), format!("no node {}", inj.node)));
            }
            if ruleset.get(&inj.pattern).is_none() {
                return Err(invalid(field("pattern"), format!("no rule {}", inj.pattern)));
            }
            let guest_ok = inj
                .vm
                .strip_prefix('g')
                .and_then(|s| s.parse::<usize>().ok())
                .is_some_and(|g| g < self.guests_per_node && format!("g{g}") == inj.vm);
            if !guest_ok {
                return Err(invalid(field("vm"), format!("no guest {}", inj.vm)));
            }
            if inj.tick > self.max_ticks {
                return Err(invalid(field("tick"), "after max_ticks"));
            }
        }
        if self.server_down.contains(&0) {
            return Err(invalid("server_down", "the server must be up for admission at tick 0"));
        }
        for (i, u) in self.updates.iter().enumerate() {
            if self.node_index(&u.node).is_none() {
                return Err(invalid(format!("updates[{i}].node"), format!("no node {}", u.node)));
            }
            if let Some(c) = u.components.iter().find(|c| !component_ids.contains(c.as_str())) {
                return Err(invalid(format!("updates[{i}].components"), format!("no component {c}")));
            }
        }
        Ok(())
    }
}
