use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::crypto::{check_integrity, Digest, Pki, PublicKey, Signature};
use crate::detect::Ruleset;
use crate::model::{CapabilityTag, SecurityComponentDescriptor, VmImage, VmKind};

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("image {0} fails its integrity check")]
    IntegrityFailure(String),
    #[error("duplicate component id {0}")]
    DuplicateComponent(String),
    #[error("component {0} has no capabilities")]
    NoCapabilities(String),
    #[error("image {0} has the wrong kind")]
    WrongKind(String),
    #[error("{file} line {line}: {reason}")]
    Parse { file: String, line: usize, reason: String },
    #[error("{0}")]
    Io(String),
}

/// What the server can hand out: components, the security VM image that
/// carries their rules, and clean guest images keyed by app manifest.
#[derive(Clone, Debug)]
pub struct ComponentCatalog {
    entries: BTreeMap<String, SecurityComponentDescriptor>,
    clean_guest_images: BTreeMap<Vec<String>, VmImage>,
    security_env_image: VmImage,
    ruleset: Ruleset,
}

impl ComponentCatalog {
    pub fn new(
        entries: Vec<SecurityComponentDescriptor>,
        clean_guest_images: Vec<VmImage>,
        security_env_image: VmImage,
        publisher_pk: &PublicKey,
    ) -> Result<Self, CatalogError> {
        let mut map = BTreeMap::new();
        for e in entries {
            if e.capabilities.is_empty() {
                return Err(CatalogError::NoCapabilities(e.component_id));
            }
            let id = e.component_id.clone();
            if map.insert(id.clone(), e).is_some() {
                return Err(CatalogError::DuplicateComponent(id));
            }
        }
        if security_env_image.kind != VmKind::SecurityEnv {
            return Err(CatalogError::WrongKind(security_env_image.image_id));
        }
        if !check_integrity(&security_env_image, publisher_pk) {
            return Err(CatalogError::IntegrityFailure(security_env_image.image_id));
        }
        let ruleset = security_ruleset(&security_env_image).map_err(|e| CatalogError::Parse {
            file: security_env_image.image_id.clone(),
            line: 0,
            reason: e,
        })?;
        let mut clean = BTreeMap::new();
        for img in clean_guest_images {
            if img.kind != VmKind::GuestOs {
                return Err(CatalogError::WrongKind(img.image_id));
            }
            if !check_integrity(&img, publisher_pk) {
                return Err(CatalogError::IntegrityFailure(img.image_id));
            }
            clean.insert(img.app_manifest.clone(), img);
        }
        Ok(Self {
            entries: map,
            clean_guest_images: clean,
            security_env_image,
            ruleset,
        })
    }

    /// Loads `components.tsv`, `rules.tsv` and `clean/*.vmimg` from `dir`.
    /// Images with a `.sig` sidecar keep that signature; others are signed
    /// by the publisher on load.
    pub fn load_dir(dir: &Path, pki: &Pki) -> Result<Self, CatalogError> {
        let read = |name: &str| {
            fs::read_to_string(dir.join(name))
                .map_err(|e| CatalogError::Io(format!("{}: {e}", dir.join(name).display())))
        };
        let entries = parse_components(&read("components.tsv")?, pki)?;
        let ruleset = Ruleset::parse(&read("rules.tsv")?).map_err(|e| CatalogError::Parse {
            file: "rules.tsv".into(),
            line: 0,
            reason: e.to_string(),
        })?;
        let security = security_env_image(&ruleset, 1, pki);
        let mut clean = Vec::new();
        let clean_dir = dir.join("clean");
        let mut paths: Vec<_> = fs::read_dir(&clean_dir)
            .map_err(|e| CatalogError::Io(format!("{}: {e}", clean_dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "vmimg"))
            .collect();
        paths.sort();
        for p in paths {
            clean.push(load_image(&p, pki)?);
        }
        Self::new(entries, clean, security, pki.publisher_pk())
    }

    pub fn entries(&self) -> impl Iterator<Item = &SecurityComponentDescriptor> {
        self.entries.values()
    }

    pub fn descriptors(&self) -> Vec<SecurityComponentDescriptor> {
        self.entries.values().cloned().collect()
    }

    pub fn get(&self, component_id: &str) -> Option<&SecurityComponentDescriptor> {
        self.entries.get(component_id)
    }

    pub fn security_env_image(&self) -> &VmImage {
        &self.security_env_image
    }

    pub fn ruleset(&self) -> &Ruleset {
        &self.ruleset
    }

    pub fn clean_image(&self, app_manifest: &[String]) -> Option<&VmImage> {
        self.clean_guest_images.get(app_manifest)
    }

    pub fn clean_images(&self) -> impl Iterator<Item = &VmImage> {
        self.clean_guest_images.values()
    }

    pub fn clean_hashes(&self) -> BTreeSet<Digest> {
        self.clean_guest_images.values().map(|i| i.content_hash).collect()
    }

    /// Replaces the security VM image, e.g. after a ruleset change.
    pub fn publish_security_image(&mut self, image: VmImage, publisher_pk: &PublicKey) -> Result<(), CatalogError> {
        let ruleset = security_ruleset(&image).map_err(|e| CatalogError::Parse {
            file: image.image_id.clone(),
            line: 0,
            reason: e,
        })?;
        if image.kind != VmKind::SecurityEnv || !check_integrity(&image, publisher_pk) {
            return Err(CatalogError::IntegrityFailure(image.image_id));
        }
        self.security_env_image = image;
        self.ruleset = ruleset;
        Ok(())
    }
}

/// The security VM's payload is the ruleset its components scan with.
pub fn security_env_image(ruleset: &Ruleset, version: u64, pki: &Pki) -> VmImage {
    VmImage::signed(
        format!("security-env-v{version}"),
        VmKind::SecurityEnv,
        Vec::new(),
        ruleset.to_text().into_bytes(),
        pki.publisher(),
    )
}

pub fn security_ruleset(image: &VmImage) -> Result<Ruleset, String> {
    let text = std::str::from_utf8(&image.payload).map_err(|_| "security payload is not utf-8".to_string())?;
    Ruleset::parse(text).map_err(|e| e.to_string())
}

/// Reads a `.vmimg` fixture, using the `.sig` sidecar when present.
pub fn load_image(path: &Path, pki: &Pki) -> Result<VmImage, CatalogError> {
    let bytes = fs::read(path).map_err(|e| CatalogError::Io(format!("{}: {e}", path.display())))?;
    let unsigned = VmImage::parse_fixture(&bytes).map_err(|e| CatalogError::Parse {
        file: path.display().to_string(),
        line: 0,
        reason: e.to_string(),
    })?;
    let sig_path = path.with_extension("vmimg.sig");
    match fs::read_to_string(&sig_path) {
        Ok(text) => {
            let sig: Signature = text.parse().map_err(|_| CatalogError::Parse {
                file: sig_path.display().to_string(),
                line: 1,
                reason: "signature is not hex".into(),
            })?;
            Ok(unsigned.with_signature(sig))
        }
        Err(_) => Ok(unsigned.sign(pki.publisher())),
    }
}

/// `component_id<TAB>version<TAB>capabilities<TAB>cpu_cost<TAB>mem_cost`.
pub fn parse_components(text: &str, pki: &Pki) -> Result<Vec<SecurityComponentDescriptor>, CatalogError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: &str| CatalogError::Parse {
            file: "components.tsv".into(),
            line: n + 1,
            reason: reason.into(),
        };
        let f: Vec<&str> = line.split('\t').collect();
        let [id, version, caps, cpu, mem] = f[..] else {
            return Err(bad("expected 5 tab-separated fields"));
        };
        let num = |s: &str| s.trim().parse::<u64>().map_err(|_| bad("bad number"));
        out.push(SecurityComponentDescriptor {
            component_id: id.to_string(),
            version: num(version)?,
            capabilities: caps
                .split(',')
                .map(str::trim)
                .filter(|c| !c.is_empty())
                .map(CapabilityTag::new)
                .collect(),
            cpu_cost: num(cpu)?,
            mem_cost: num(mem)?,
            public_key: pki.component(id).public_key().clone(),
        });
    }
    Ok(out)
}

pub fn components_to_tsv(entries: &[SecurityComponentDescriptor]) -> String {
    entries
        .iter()
        .map(|c| {
            let caps: Vec<&str> = c.capabilities.iter().map(|t| t.as_str()).collect();
            format!(
                "{}\t{}\t{}\t{}\t{}\n",
                c.component_id,
                c.version,
                caps.join(","),
                c.cpu_cost,
                c.mem_cost
            )
        })
        .collect()
}
