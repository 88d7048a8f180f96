//! Deterministic discrete-event harness: one server, N agents, an
//! in-memory transport, seeded infection propagation.
//!
//! Each tick runs, in order: delivery of due server pushes, propagation,
//! injections, scheduled component updates, agent housekeeping and guard
//! cycles, a second delivery pass, and the server's deep analysis.

pub mod scenario;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{AgentConfig, BootOutcome, LinkError, NodeAgent, ServerLink};
use crate::crypto::{hash_content, Digest, Pki, PublicKey};
use crate::evidence::EvidenceStore;
use crate::fixtures;
use crate::journal::{Journal, TraceEvent};
use crate::server::{catalog::ComponentCatalog, SecurityServer, ServerConfig};
use crate::wire::{canonical_bytes, Envelope};
use crate::Tick;

pub use scenario::{
    ComponentSpec, Injection, NodeSpec, ProfileSpec, RuleSpec, Scenario, ScenarioError, Tamper, Topology, UpdateSpec,
};

pub const SIM_ACTOR: &str = "sim";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    ToServer,
    ToNode,
}

/// Every envelope that crossed the in-memory transport.
#[derive(Clone, Debug, PartialEq)]
pub struct TranscriptEntry {
    pub tick: Tick,
    pub node_id: String,
    pub direction: Direction,
    pub envelope: Envelope,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Incident {
    pub node_id: String,
    pub vm_id: String,
    pub exposed_at: Option<Tick>,
    pub halt_tick: Tick,
    pub evidence: Option<Digest>,
    pub replacement_vm: Option<String>,
    pub replace_tick: Option<Tick>,
    pub replacement_hash: Option<Digest>,
}

impl Incident {
    pub fn detection_latency(&self) -> Option<Tick> {
        self.exposed_at.map(|t| self.halt_tick - t)
    }

    pub fn downtime(&self) -> Option<Tick> {
        self.replace_tick.map(|t| t - self.halt_tick)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Metrics {
    pub nodes: usize,
    pub admitted: usize,
    pub denied: usize,
    pub self_check_failures: usize,
    pub injections: usize,
    pub infections: usize,
    /// Guests infected by propagation rather than injection.
    pub propagation_count: usize,
    pub evidence_count: usize,
    pub quarantines_completed: usize,
    pub replacements: usize,
    pub first_halt_tick: Option<Tick>,
    /// Distinct nodes carrying an infection when the first halt happened.
    pub infected_at_first_halt: Option<usize>,
    pub analyses: usize,
    pub incidents: Vec<Incident>,
}

impl Metrics {
    /// `key=value` lines, stable order.
    pub fn to_kv(&self) -> String {
        let opt = |v: Option<Tick>| v.map(|t| t.to_string()).unwrap_or_else(|| "-".into());
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("nodes", self.nodes.to_string());
        kv("admitted", self.admitted.to_string());
        kv("denied", self.denied.to_string());
        kv("self_check_failures", self.self_check_failures.to_string());
        kv("injections", self.injections.to_string());
        kv("infections", self.infections.to_string());
        kv("propagation_count", self.propagation_count.to_string());
        kv("evidence_count", self.evidence_count.to_string());
        kv("quarantines_completed", self.quarantines_completed.to_string());
        kv("replacements", self.replacements.to_string());
        kv("first_halt_tick", opt(self.first_halt_tick));
        kv(
            "infected_at_first_halt",
            opt(self.infected_at_first_halt.map(|n| n as Tick)),
        );
        kv("analyses", self.analyses.to_string());
        kv("incidents", self.incidents.len().to_string());
        for (i, inc) in self.incidents.iter().enumerate() {
            let p = format!("incident.{i}");
            kv(&format!("{p}.node"), inc.node_id.clone());
            kv(&format!("{p}.vm"), inc.vm_id.clone());
            kv(&format!("{p}.exposed_at"), opt(inc.exposed_at));
            kv(&format!("{p}.halt_tick"), inc.halt_tick.to_string());
            kv(&format!("{p}.detection_latency"), opt(inc.detection_latency()));
            kv(
                &format!("{p}.evidence"),
                inc.evidence.map(|d| d.to_hex()).unwrap_or_else(|| "-".into()),
            );
            kv(
                &format!("{p}.replacement_vm"),
                inc.replacement_vm.clone().unwrap_or_else(|| "-".into()),
            );
            kv(&format!("{p}.replace_tick"), opt(inc.replace_tick));
            kv(&format!("{p}.downtime"), opt(inc.downtime()));
            kv(
                &format!("{p}.replacement_hash"),
                inc.replacement_hash.map(|d| d.to_hex()).unwrap_or_else(|| "-".into()),
            );
        }
        out
    }
}

pub struct ScenarioOutcome {
    pub trace: Vec<TraceEvent>,
    pub metrics: Metrics,
    pub transcript: Vec<TranscriptEntry>,
    pub clean_hashes: BTreeSet<Digest>,
    pub publisher_pk: PublicKey,
    pub server_pk: PublicKey,
    pub store: EvidenceStore,
    pub agents: Vec<NodeAgent>,
}

impl ScenarioOutcome {
    pub fn trace_tsv(&self) -> String {
        trace_tsv(&self.trace)
    }
}

pub fn trace_tsv(trace: &[TraceEvent]) -> String {
    trace.iter().map(|e| e.to_tsv() + "\n").collect()
}

struct SimLink<'a> {
    server: &'a mut SecurityServer,
    node: usize,
    node_id: &'a str,
    tick: Tick,
    down: bool,
    delay: Tick,
    journal: &'a Journal,
    transcript: &'a mut Vec<TranscriptEntry>,
    pushes: &'a mut Vec<(Tick, usize, Envelope)>,
}

impl ServerLink for SimLink<'_> {
    fn call(&mut self, request: Envelope) -> Result<Envelope, LinkError> {
        let digest = hash_content(&canonical_bytes(&request));
        let detail = format!("type={};seq={}", request.body.kind(), request.seq);
        if self.down {
            self.journal
                .record_with_digest(self.tick, self.node_id, "send_dropped", detail, digest);
            return Err(LinkError::Unreachable("server down".into()));
        }
        self.journal
            .record_with_digest(self.tick, self.node_id, "send", detail, digest);
        let out = self.server.handle(&request, self.tick);
        self.transcript.push(TranscriptEntry {
            tick: self.tick,
            node_id: self.node_id.to_string(),
            direction: Direction::ToServer,
            envelope: request,
        });
        self.journal.record_with_digest(
            self.tick,
            crate::server::SERVER_SENDER,
            "reply",
            format!(
                "to={};type={};seq={}",
                self.node_id,
                out.reply.body.kind(),
                out.reply.seq
            ),
            hash_content(&canonical_bytes(&out.reply)),
        );
        self.transcript.push(TranscriptEntry {
            tick: self.tick,
            node_id: self.node_id.to_string(),
            direction: Direction::ToNode,
            envelope: out.reply.clone(),
        });
        for push in out.pushes {
            queue_push(
                self.journal,
                self.pushes,
                self.tick,
                self.delay,
                self.node,
                self.node_id,
                push,
            );
        }
        Ok(out.reply)
    }
}

fn queue_push(
    journal: &Journal,
    pushes: &mut Vec<(Tick, usize, Envelope)>,
    tick: Tick,
    delay: Tick,
    node: usize,
    node_id: &str,
    push: Envelope,
) {
    journal.record_with_digest(
        tick,
        crate::server::SERVER_SENDER,
        "push_queued",
        format!(
            "to={node_id};type={};seq={};due={}",
            push.body.kind(),
            push.seq,
            tick + delay
        ),
        hash_content(&canonical_bytes(&push)),
    );
    pushes.push((tick + delay, node, push));
}

#[derive(Clone, Debug)]
struct Exposure {
    pattern: Vec<u8>,
    tick: Tick,
}

struct Sim {
    scenario: Scenario,
    pki: Pki,
    node_ids: Vec<String>,
    server: SecurityServer,
    agents: Vec<NodeAgent>,
    /// (due tick, node index, envelope), in send order.
    pushes: Vec<(Tick, usize, Envelope)>,
    transcript: Vec<TranscriptEntry>,
    journal: Journal,
    rng: ChaCha8Rng,
    exposures: BTreeMap<(usize, String), Exposure>,
    metrics: Metrics,
}

macro_rules! link {
    ($sim:expr, $i:expr, $tick:expr) => {
        SimLink {
            server: &mut $sim.server,
            node: $i,
            node_id: &$sim.node_ids[$i],
            tick: $tick,
            down: $sim.scenario.server_down.contains(&$tick),
            delay: $sim.scenario.provisioning_delay,
            journal: &$sim.journal,
            transcript: &mut $sim.transcript,
            pushes: &mut $sim.pushes,
        }
    };
}

/// Runs a scenario with an in-memory evidence store.
pub fn run_scenario(scenario: &Scenario) -> Result<ScenarioOutcome, ScenarioError> {
    run_scenario_with_store(scenario, EvidenceStore::in_memory())
}

pub fn run_scenario_with_store(scenario: &Scenario, store: EvidenceStore) -> Result<ScenarioOutcome, ScenarioError> {
    scenario.validate()?;
    let mut sim = Sim::new(scenario.clone(), store)?;
    for tick in 0..=scenario.max_ticks {
        sim.step(tick)?;
    }
    Ok(sim.finish())
}

impl Sim {
    fn new(scenario: Scenario, store: EvidenceStore) -> Result<Self, ScenarioError> {
        let runtime = |e: &dyn std::fmt::Display| ScenarioError::Runtime(e.to_string());
        let pki = Pki::from_seed(scenario.seed);
        let ruleset = scenario.ruleset()?;
        let catalog: ComponentCatalog = fixtures::catalog_with(scenario.components(&pki), &ruleset, &pki);
        let journal = Journal::enabled();
        let config = ServerConfig {
            lease_ticks: scenario.lease_ticks.unwrap_or(crate::server::DEFAULT_LEASE_TICKS),
            token_ttl: scenario.lease_ticks.unwrap_or(crate::server::DEFAULT_LEASE_TICKS),
            anomaly_threshold: scenario.threshold()?,
        };
        let server = SecurityServer::new(pki.clone(), catalog, store, config)
            .map_err(|e| runtime(&e))?
            .with_journal(journal.clone());
        let server_pk = server.public_key().clone();

        let node_ids: Vec<String> = (0..scenario.num_nodes).map(Scenario::node_id).collect();
        let mut agents = Vec::new();
        for id in &node_ids {
            let tamper = scenario.nodes.get(id).and_then(|n| n.tamper);
            let mut stack = fixtures::node_stack(id, scenario.guests_per_node, &pki);
            let identity = match tamper {
                Some(Tamper::RogueKey) => Pki::from_seed(scenario.seed ^ 0x0bad_5eed).node(id),
                _ => pki.node(id),
            };
            if matches!(tamper, Some(Tamper::Core | Tamper::ForgedCore)) {
                stack.core_image.payload.extend_from_slice(b"\0rootkit");
            }
            let config = AgentConfig {
                anomaly_threshold: scenario.threshold()?,
                skip_self_check: tamper == Some(Tamper::ForgedCore),
            };
            agents.push(
                NodeAgent::new(
                    identity,
                    pki.publisher_pk().clone(),
                    server_pk.clone(),
                    scenario.profile_for(id),
                    stack,
                )
                .with_config(config)
                .with_journal(journal.clone()),
            );
        }
        let rng = ChaCha8Rng::seed_from_u64(scenario.seed);
        let metrics = Metrics {
            nodes: scenario.num_nodes,
            ..Metrics::default()
        };
        journal.record(
            0,
            SIM_ACTOR,
            "scenario",
            format!(
                "seed={};nodes={};p={};latency={};delay={};topology={:?}",
                scenario.seed,
                scenario.num_nodes,
                scenario.propagation_probability,
                scenario.detector_latency,
                scenario.provisioning_delay,
                scenario.topology
            ),
        );
        Ok(Self {
            scenario,
            pki,
            node_ids,
            server,
            agents,
            pushes: Vec::new(),
            transcript: Vec::new(),
            journal,
            rng,
            exposures: BTreeMap::new(),
            metrics,
        })
    }

    fn step(&mut self, tick: Tick) -> Result<(), ScenarioError> {
        if tick == 0 {
            self.admit_all(tick);
        }
        self.deliver(tick);
        self.propagate(tick);
        self.inject(tick);
        self.push_updates(tick);
        let halts_before = self.halt_count();
        for i in 0..self.agents.len() {
            if !self.agents[i].is_admitted(tick) {
                continue;
            }
            let mut link = link!(self, i, tick);
            for e in self.agents[i].maintain(&mut link, tick) {
                self.journal
                    .record(tick, &self.node_ids[i], "agent_error", format!("error={e}"));
            }
            let mut link = link!(self, i, tick);
            self.agents[i].guard_cycle(&mut link, tick);
        }
        if self.metrics.first_halt_tick.is_none() && self.halt_count() > halts_before {
            let infected: BTreeSet<usize> = self.exposures.keys().map(|(n, _)| *n).collect();
            self.metrics.first_halt_tick = Some(tick);
            self.metrics.infected_at_first_halt = Some(infected.len());
        }
        self.deliver(tick);
        if !self.scenario.server_down.contains(&tick) {
            let done = self
                .server
                .run_deep_analysis(tick)
                .map_err(|e| ScenarioError::Runtime(e.to_string()))?;
            self.metrics.analyses += done.len();
        }
        Ok(())
    }

    fn halt_count(&self) -> usize {
        self.agents
            .iter()
            .flat_map(|a| a.stack().guest_vms.iter())
            .filter(|vm| vm.halt_tick().is_some())
            .count()
    }

    fn admit_all(&mut self, tick: Tick) {
        for i in 0..self.agents.len() {
            let mut link = link!(self, i, tick);
            match self.agents[i].boot_sequence(&mut link, tick) {
                Ok(BootOutcome::Admitted) => self.metrics.admitted += 1,
                Ok(BootOutcome::Denied(_)) => self.metrics.denied += 1,
                Err(crate::agent::AgentError::IntegritySelfCheckFailed) => {
                    self.metrics.self_check_failures += 1;
                    self.metrics.denied += 1;
                }
                Err(e) => {
                    self.metrics.denied += 1;
                    self.journal
                        .record(tick, &self.node_ids[i], "boot_error", format!("error={e}"));
                }
            }
        }
    }

    fn deliver(&mut self, tick: Tick) {
        let (due, later): (Vec<_>, Vec<_>) = std::mem::take(&mut self.pushes)
            .into_iter()
            .partition(|(at, _, _)| *at <= tick);
        self.pushes = later;
        for (_, i, push) in due {
            self.journal.record_with_digest(
                tick,
                &self.node_ids[i],
                "deliver",
                format!("type={};seq={}", push.body.kind(), push.seq),
                hash_content(&canonical_bytes(&push)),
            );
            self.transcript.push(TranscriptEntry {
                tick,
                node_id: self.node_ids[i].clone(),
                direction: Direction::ToNode,
                envelope: push.clone(),
            });
            let mut link = link!(self, i, tick);
            // Rejections are journaled by the agent.
            let _ = self.agents[i].handle_push(&mut link, &push, tick);
        }
    }

    /// One Bernoulli draw per (infected running guest, susceptible running
    /// guest on a neighbour) pair. Guests infected during this step do not
    /// spread until the next tick.
    fn propagate(&mut self, tick: Tick) {
        let p = self.scenario.propagation_probability;
        let n = self.agents.len();
        let sources: Vec<(usize, String, Exposure)> = self
            .exposures
            .iter()
            .filter(|((node, vm), e)| {
                e.tick < tick && self.agents[*node].stack().guest(vm).is_some_and(|g| g.is_running())
            })
            .map(|((node, vm), e)| (*node, vm.clone(), e.clone()))
            .collect();
        for (src, src_vm, exposure) in sources {
            for dst in self.scenario.topology.neighbors(src, n) {
                let targets: Vec<String> = self.agents[dst].running_guests().map(|g| g.vm_id.clone()).collect();
                for dst_vm in targets {
                    if self.exposures.contains_key(&(dst, dst_vm.clone())) {
                        continue;
                    }
                    if !self.rng.random_bool(p) {
                        continue;
                    }
                    let visible = tick + self.scenario.detector_latency;
                    if self.agents[dst]
                        .expose(&dst_vm, &exposure.pattern, tick, visible)
                        .is_ok()
                    {
                        self.journal.record(
                            tick,
                            SIM_ACTOR,
                            "propagate",
                            format!(
                                "src_node={};src_vm={src_vm};dst_node={};dst_vm={dst_vm}",
                                self.node_ids[src], self.node_ids[dst]
                            ),
                        );
                        self.exposures.insert(
                            (dst, dst_vm),
                            Exposure {
                                pattern: exposure.pattern.clone(),
                                tick,
                            },
                        );
                        self.metrics.propagation_count += 1;
                        self.metrics.infections += 1;
                    }
                }
            }
        }
    }

    fn inject(&mut self, tick: Tick) {
        let due: Vec<Injection> = self
            .scenario
            .injections
            .iter()
            .filter(|inj| inj.tick == tick)
            .cloned()
            .collect();
        let ruleset = self.server.catalog().ruleset().clone();
        for inj in due {
            let i = self.scenario.node_index(&inj.node).expect("validated");
            let pattern = ruleset.get(&inj.pattern).expect("validated").pattern.clone();
            let visible = tick + self.scenario.detector_latency;
            let detail = format!("node={};vm={};pattern={}", inj.node, inj.vm, inj.pattern);
            match self.agents[i].expose(&inj.vm, &pattern, tick, visible) {
                Ok(()) => {
                    self.journal.record(tick, SIM_ACTOR, "inject", detail);
                    self.metrics.injections += 1;
                    self.metrics.infections += 1;
                    self.exposures
                        .entry((i, inj.vm.clone()))
                        .or_insert(Exposure { pattern, tick });
                }
                Err(e) => self
                    .journal
                    .record(tick, SIM_ACTOR, "inject_skipped", format!("{detail};error={e}")),
            }
        }
    }

    fn push_updates(&mut self, tick: Tick) {
        let due: Vec<UpdateSpec> = self
            .scenario
            .updates
            .iter()
            .filter(|u| u.tick == tick)
            .cloned()
            .collect();
        for u in due {
            let i = self.scenario.node_index(&u.node).expect("validated");
            match self.server.push_component_update(&u.node, &u.components, tick) {
                Ok(env) => queue_push(
                    &self.journal,
                    &mut self.pushes,
                    tick,
                    self.scenario.provisioning_delay,
                    i,
                    &self.node_ids[i],
                    env,
                ),
                Err(e) => self
                    .journal
                    .record(tick, SIM_ACTOR, "update_refused", format!("node={};error={e}", u.node)),
            }
        }
    }

    fn finish(self) -> ScenarioOutcome {
        let mut metrics = self.metrics;
        metrics.evidence_count = self.server.store().len();
        for (i, agent) in self.agents.iter().enumerate() {
            metrics.quarantines_completed += agent.stored_evidence().len();
            metrics.replacements += agent.replacements().len();
            for vm in &agent.stack().guest_vms {
                let Some(halt_tick) = vm.halt_tick() else { continue };
                let replacement = agent.replacements().iter().find(|r| r.old_vm == vm.vm_id);
                metrics.incidents.push(Incident {
                    node_id: self.node_ids[i].clone(),
                    vm_id: vm.vm_id.clone(),
                    exposed_at: self.exposures.get(&(i, vm.vm_id.clone())).map(|e| e.tick),
                    halt_tick,
                    evidence: agent.stored_evidence().get(&vm.vm_id).copied(),
                    replacement_vm: replacement.map(|r| r.new_vm.clone()),
                    replace_tick: replacement.map(|r| r.replace_tick),
                    replacement_hash: replacement.map(|r| r.payload_hash),
                });
            }
        }
        metrics
            .incidents
            .sort_by(|a, b| (a.halt_tick, &a.node_id, &a.vm_id).cmp(&(b.halt_tick, &b.node_id, &b.vm_id)));
        let clean_hashes = self.server.catalog().clean_hashes();
        let publisher_pk = self.pki.publisher_pk().clone();
        let server_pk = self.server.public_key().clone();
        ScenarioOutcome {
            trace: self.journal.snapshot(),
            metrics,
            transcript: self.transcript,
            clean_hashes,
            publisher_pk,
            server_pk,
            store: self.server.store().clone(),
            agents: self.agents,
        }
    }
}

/// Runs `scenario` `runs` times and reports whether all traces are equal.
pub fn is_deterministic(scenario: &Scenario, runs: usize) -> Result<bool, ScenarioError> {
    let first = trace_tsv(&run_scenario(scenario)?.trace);
    for _ in 1..runs {
        if trace_tsv(&run_scenario(scenario)?.trace) != first {
            return Ok(false);
        }
    }
    Ok(true)
}
