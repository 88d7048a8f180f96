//! Python module `vsoa_py`: hashing and signing, the VM state machine,
//! both detectors, component selection, the simulator and the evidence
//! inspection commands.

use std::collections::BTreeMap;
use std::path::Path;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use vsoa::crypto::{self, KeyOwner, Pki};
use vsoa::detect::{byte_entropy, signature_scan as scan, Observation, Ruleset, SignatureRule};
use vsoa::evidence::{self, EvidenceQuery};
use vsoa::model::{self, NodeProfile, Resource, VmEvent, VmState};
use vsoa::server::catalog::parse_components;
use vsoa::sim::{self, Scenario};
use vsoa::Digest;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Hex SHA-256 of `data`.
#[pyfunction]
fn hash_content(data: &[u8]) -> String {
    crypto::hash_content(data).to_hex()
}

/// An Ed25519 keypair derived from a deployment seed and an owner string
/// such as `"server"` or `"node:n0"`.
#[pyclass(frozen)]
struct KeyPair {
    inner: crypto::KeyPair,
}

#[pymethods]
impl KeyPair {
    #[staticmethod]
    fn derive(seed: u64, owner: &str) -> PyResult<Self> {
        let owner: KeyOwner = owner.parse().map_err(value_err)?;
        Ok(Self {
            inner: crypto::KeyPair::derive(seed, owner),
        })
    }

    #[getter]
    fn public_key(&self) -> String {
        self.inner.public_key.to_hex()
    }

    fn sign(&self, msg: &[u8]) -> String {
        self.inner.sign(msg).to_hex()
    }
}

#[pyfunction]
fn verify(public_key: &str, msg: &[u8], signature: &str) -> PyResult<bool> {
    let pk = public_key.parse().map_err(value_err)?;
    let sig = signature.parse().map_err(value_err)?;
    Ok(crypto::verifies(&pk, msg, &sig))
}

fn parse_named<T: Copy + std::fmt::Debug>(all: &[T], name: &str) -> PyResult<T> {
    all.iter()
        .copied()
        .find(|v| format!("{v:?}") == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown name {name:?}")))
}

/// Next state name, or ValueError for an illegal pair.
#[pyfunction]
fn transition(state: &str, event: &str) -> PyResult<String> {
    let s = parse_named(&VmState::ALL, state)?;
    let e = parse_named(&VmEvent::ALL, event)?;
    model::transition(s, e).map(|n| format!("{n:?}")).map_err(value_err)
}

/// Rule id of the first matching `(rule_id, pattern)` pair, or None.
#[pyfunction]
fn signature_scan(data: Vec<u8>, rules: Vec<(String, Vec<u8>)>) -> PyResult<Option<String>> {
    let ruleset = Ruleset::new(
        rules
            .into_iter()
            .map(|(rule_id, pattern)| SignatureRule {
                rule_id,
                pattern,
                description: String::new(),
            })
            .collect(),
    )
    .map_err(value_err)?;
    let obs = Observation {
        vm_id: String::new(),
        tick: 0,
        resource: Resource::GuestMemory,
        data,
    };
    Ok(match scan(&obs, &ruleset) {
        vsoa::detect::Verdict::Infected(vsoa::detect::Cause::Rule(id)) => Some(id),
        _ => None,
    })
}

/// Shannon entropy of the byte distribution, bits per byte.
#[pyfunction]
fn anomaly_score(data: &[u8]) -> f64 {
    byte_entropy(data)
}

/// Component ids chosen for a profile (key=value text) from a catalog in
/// components.tsv form.
#[pyfunction]
fn select_components(profile: &str, components_tsv: &str, seed: u64) -> PyResult<Vec<String>> {
    let profile = NodeProfile::parse("n0", profile).map_err(value_err)?;
    let catalog = parse_components(components_tsv, &Pki::from_seed(seed)).map_err(value_err)?;
    let picked = vsoa::server::select_components(&profile, &catalog).map_err(value_err)?;
    Ok(picked.into_iter().map(|c| c.component_id).collect())
}

/// Result of a simulator run.
#[pyclass(frozen)]
struct ScenarioResult {
    #[pyo3(get)]
    trace: String,
    #[pyo3(get)]
    metrics: BTreeMap<String, String>,
    #[pyo3(get)]
    clean_hashes: Vec<String>,
}

/// Runs a TOML scenario, optionally persisting evidence under `evidence`.
#[pyfunction]
#[pyo3(signature = (scenario_toml, evidence=None))]
fn run_scenario(scenario_toml: &str, evidence: Option<&str>) -> PyResult<ScenarioResult> {
    let sc = Scenario::from_toml(scenario_toml).map_err(value_err)?;
    let store = match evidence {
        Some(dir) => vsoa::evidence::EvidenceStore::open(dir).map_err(|e| PyRuntimeError::new_err(e.to_string()))?,
        None => vsoa::evidence::EvidenceStore::in_memory(),
    };
    let out = sim::run_scenario_with_store(&sc, store).map_err(value_err)?;
    let metrics = out
        .metrics
        .to_kv()
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    Ok(ScenarioResult {
        trace: out.trace_tsv(),
        metrics,
        clean_hashes: out.clean_hashes.iter().map(Digest::to_hex).collect(),
    })
}

/// Rows `(node_id, vm_id, tick, hash)` sorted by tick then node.
#[pyfunction]
#[pyo3(signature = (store, node_id=None))]
fn evidence_list(store: &str, node_id: Option<String>) -> PyResult<Vec<(String, String, u64, String)>> {
    let query = EvidenceQuery {
        node_id,
        ..EvidenceQuery::default()
    };
    let rows = evidence::evidence_list(Path::new(store), &query).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(rows
        .into_iter()
        .map(|r| (r.node_id, r.vm_id, r.tick, r.hash.to_hex()))
        .collect())
}

/// `(passed, [(check, status), ...])` for one stored bundle.
#[pyfunction]
fn evidence_verify(store: &str, hash: &str) -> PyResult<(bool, Vec<(String, String)>)> {
    let address: Digest = hash.parse().map_err(value_err)?;
    let report =
        evidence::evidence_verify(Path::new(store), &address).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok((
        report.passed(),
        report
            .checks
            .into_iter()
            .map(|(name, s)| (name, s.as_str().to_string()))
            .collect(),
    ))
}

#[pymodule]
fn vsoa_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<KeyPair>()?;
    m.add_class::<ScenarioResult>()?;
    m.add_function(wrap_pyfunction!(hash_content, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(transition, m)?)?;
    m.add_function(wrap_pyfunction!(signature_scan, m)?)?;
    m.add_function(wrap_pyfunction!(anomaly_score, m)?)?;
    m.add_function(wrap_pyfunction!(select_components, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(evidence_list, m)?)?;
    m.add_function(wrap_pyfunction!(evidence_verify, m)?)?;
    Ok(())
}
