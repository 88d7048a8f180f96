//! Built-in demo deployment: ruleset, component catalog, clean guest
//! images and node stacks. The simulator falls back to these when a
//! scenario does not bring its own, and `vsoa fixtures` writes them out.

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::Path;

use crate::crypto::Pki;
use crate::detect::{Ruleset, SignatureRule};
use crate::model::{
    CapabilityTag, LayerStack, NodeClass, NodeProfile, SecurityComponentDescriptor, VmImage, VmInstance, VmKind,
};
use crate::server::catalog::{components_to_tsv, security_env_image, ComponentCatalog};

/// App manifests handed out round-robin to guests g0, g1, ...
pub const GUEST_MANIFESTS: [&[&str]; 3] = [&["browser", "office"], &["httpd"], &["postgres"]];

pub fn default_ruleset() -> Ruleset {
    let rule = |id: &str, pattern: &[u8], description: &str| SignatureRule {
        rule_id: id.to_string(),
        pattern: pattern.to_vec(),
        description: description.to_string(),
    };
    Ruleset::new(vec![
        rule("worm-a", b"\xde\xad\xbe\xefWORM-A", "self-propagating worm, variant A"),
        rule("worm-b", b"\xca\xfe\xba\xbeWORM-B", "self-propagating worm, variant B"),
        rule("trojan-x", b"TROJAN-X-DROPPER", "dropper stub"),
        rule("c2-beacon", b"BEACON://c2.invalid", "command and control beacon"),
    ])
    .expect("built-in rules are valid")
}

pub fn default_components(pki: &Pki) -> Vec<SecurityComponentDescriptor> {
    let c = |id: &str, caps: &[&str], cpu: u64, mem: u64| SecurityComponentDescriptor {
        component_id: id.to_string(),
        version: 1,
        capabilities: caps.iter().map(|t| CapabilityTag::new(*t)).collect(),
        cpu_cost: cpu,
        mem_cost: mem,
        public_key: pki.component(id).public_key().clone(),
    };
    vec![
        c(
            "av-full",
            &[CapabilityTag::SIGNATURE_SCAN, CapabilityTag::ANOMALY_SCAN],
            30,
            40,
        ),
        c("av-lite", &[CapabilityTag::SIGNATURE_SCAN], 10, 10),
        c("ids-entropy", &[CapabilityTag::ANOMALY_SCAN], 15, 10),
        c("fw-filter", &[CapabilityTag::FIREWALL_FILTER], 5, 5),
        c(
            "fw-ids",
            &[CapabilityTag::FIREWALL_FILTER, CapabilityTag::ANOMALY_SCAN],
            20,
            15,
        ),
    ]
}

pub fn manifest_for(guest_index: usize) -> Vec<String> {
    GUEST_MANIFESTS[guest_index % GUEST_MANIFESTS.len()]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

/// Low-entropy text payload, a few KiB, unique per manifest.
pub fn guest_payload(manifest: &[String]) -> Vec<u8> {
    let line = format!("guest-os 1.0 apps={}\n", manifest.join(","));
    line.repeat(4096 / line.len() + 1).into_bytes()
}

pub fn clean_guest_image(manifest: &[String], pki: &Pki) -> VmImage {
    VmImage::signed(
        format!("guest-{}", manifest.join("+")),
        VmKind::GuestOs,
        manifest.to_vec(),
        guest_payload(manifest),
        pki.publisher(),
    )
}

pub fn core_image(pki: &Pki) -> VmImage {
    VmImage::signed(
        "core-1.0",
        VmKind::GuestOs,
        Vec::new(),
        b"core-os kernel 1.0 + hypervisor 1.0\n".repeat(32),
        pki.publisher(),
    )
}

pub fn default_catalog(pki: &Pki) -> ComponentCatalog {
    catalog_with(default_components(pki), &default_ruleset(), pki)
}

pub fn catalog_with(components: Vec<SecurityComponentDescriptor>, ruleset: &Ruleset, pki: &Pki) -> ComponentCatalog {
    let clean = (0..GUEST_MANIFESTS.len())
        .map(|i| clean_guest_image(&manifest_for(i), pki))
        .collect();
    ComponentCatalog::new(
        components,
        clean,
        security_env_image(ruleset, 1, pki),
        pki.publisher_pk(),
    )
    .expect("built-in catalog is consistent")
}

pub fn default_profile(node_id: &str) -> NodeProfile {
    NodeProfile {
        node_id: node_id.to_string(),
        node_class: NodeClass::Desktop,
        cpu_budget: 100,
        mem_budget: 100,
        required_capabilities: BTreeSet::from([CapabilityTag::new(CapabilityTag::SIGNATURE_SCAN)]),
    }
}

/// A fresh stack: signed core, `guests` provisioned guest VMs, no
/// security VM yet.
pub fn node_stack(node_id: &str, guests: usize, pki: &Pki) -> LayerStack {
    LayerStack {
        hardware_id: format!("hw-{node_id}"),
        core_image: core_image(pki),
        guest_vms: (0..guests)
            .map(|i| VmInstance::provision(format!("g{i}"), clean_guest_image(&manifest_for(i), pki)))
            .collect(),
        security_vm: None,
    }
}

/// Writes a catalog directory, a stack directory and a profile file.
pub fn write_fixture_tree(out: &Path, pki: &Pki) -> io::Result<()> {
    let catalog = out.join("catalog");
    let stack = out.join("stack");
    fs::create_dir_all(catalog.join("clean"))?;
    fs::create_dir_all(&stack)?;
    let write_image = |path: &Path, image: &VmImage| -> io::Result<()> {
        fs::write(path, image.to_fixture_bytes())?;
        fs::write(path.with_extension("vmimg.sig"), image.signature.to_hex())
    };
    fs::write(
        catalog.join("components.tsv"),
        components_to_tsv(&default_components(pki)),
    )?;
    fs::write(catalog.join("rules.tsv"), default_ruleset().to_text())?;
    for i in 0..GUEST_MANIFESTS.len() {
        let image = clean_guest_image(&manifest_for(i), pki);
        write_image(&catalog.join("clean").join(format!("{}.vmimg", image.image_id)), &image)?;
    }
    let stack_model = node_stack("n0", 1, pki);
    write_image(&stack.join("core.vmimg"), &stack_model.core_image)?;
    for vm in &stack_model.guest_vms {
        write_image(&stack.join(format!("{}.vmimg", vm.vm_id)), &vm.image)?;
    }
    fs::write(out.join("profile.txt"), default_profile("n0").to_profile_text())
}

/// Loads `core.vmimg` plus every other `*.vmimg` in `dir` as a guest VM
/// named after the file stem.
pub fn load_stack(dir: &Path, node_id: &str, pki: &Pki) -> Result<LayerStack, crate::server::catalog::CatalogError> {
    use crate::server::catalog::{load_image, CatalogError};
    let core = load_image(&dir.join("core.vmimg"), pki)?;
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| CatalogError::Io(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "vmimg") && !p.ends_with("core.vmimg"))
        .collect();
    paths.sort();
    let mut guest_vms = Vec::new();
    for p in paths {
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("guest").to_string();
        guest_vms.push(VmInstance::provision(stem, load_image(&p, pki)?));
    }
    Ok(LayerStack {
        hardware_id: format!("hw-{node_id}"),
        core_image: core,
        guest_vms,
        security_vm: None,
    })
}
