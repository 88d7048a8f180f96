//! Evidence bundles and the content-addressed evidence store.
//!
//! Layout under the store root:
//!
//! ```text
//! bundles/<hex address>          canonical bytes of {meta, snapshot}
//! bundles/<hex address>.custody  canonical JSON list of custody records
//! index.tsv                      node_id, vm_id, tick, address
//! trust_root.pub                 publisher public key (hex)
//! ```
//!
//! The address is the SHA-256 of the bundle file, so stored bytes always
//! re-hash to their name. Custody lives beside the bundle because the
//! server appends to it after the address is fixed. Every write goes to a
//! temporary file first and is renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{hash_content, verify_custody, CustodyRecord, Digest, PublicKey};
use crate::detect::Verdict;
use crate::Tick;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("custody chain broken at record {0}")]
    CustodyBroken(usize),
    #[error("snapshot does not match its recorded hash")]
    SnapshotMismatch,
    #[error("bundle {0} already stored")]
    DuplicateBundle(Digest),
    #[error("bundle {0} not found")]
    BundleNotFound(Digest),
    #[error("store unreadable: {0}")]
    StoreUnreadable(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidenceMeta {
    pub node_id: String,
    pub vm_id: String,
    pub halt_tick: Tick,
    pub verdict: Verdict,
    /// Applications of the halted guest, used to build its replacement.
    pub app_manifest: Vec<String>,
    pub snapshot_hash: Digest,
}

/// A full copy of a halted VM plus its chain of custody.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidenceBundle {
    #[serde(with = "hex::serde")]
    pub snapshot: Vec<u8>,
    pub meta: EvidenceMeta,
    pub custody: Vec<CustodyRecord>,
}

#[derive(Serialize, Deserialize)]
struct BundleContent {
    meta: EvidenceMeta,
    #[serde(with = "hex::serde")]
    snapshot: Vec<u8>,
}

impl EvidenceBundle {
    pub fn new(snapshot: Vec<u8>, meta: EvidenceMeta) -> Self {
        Self {
            snapshot,
            meta,
            custody: Vec::new(),
        }
    }

    /// The stored file bytes: everything except custody.
    pub fn content_bytes(&self) -> Vec<u8> {
        crate::canonical::to_bytes(&BundleContent {
            meta: self.meta.clone(),
            snapshot: self.snapshot.clone(),
        })
    }

    pub fn address(&self) -> Digest {
        hash_content(&self.content_bytes())
    }

    pub fn snapshot_intact(&self) -> bool {
        hash_content(&self.snapshot) == self.meta.snapshot_hash
    }

    /// Index of the first custody record that fails, if any.
    pub fn first_broken_custody(&self, publisher_pk: &PublicKey) -> Option<usize> {
        verify_custody(self.address(), &self.custody, publisher_pk)
            .iter()
            .position(|ok| !ok)
    }

    fn from_parts(content: &[u8], custody: Vec<CustodyRecord>) -> Result<Self, serde_json::Error> {
        let c: BundleContent = crate::canonical::from_bytes(content)?;
        Ok(Self {
            snapshot: c.snapshot,
            meta: c.meta,
            custody,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub node_id: String,
    pub vm_id: String,
    pub tick: Tick,
    pub hash: Digest,
}

impl IndexEntry {
    pub fn to_tsv(&self) -> String {
        format!("{}\t{}\t{}\t{}", self.node_id, self.vm_id, self.tick, self.hash)
    }
}

fn parse_index(text: &str) -> Result<Vec<IndexEntry>, StoreError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = || StoreError::StoreUnreadable(format!("index.tsv line {}: {line:?}", n + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        let [node_id, vm_id, tick, hash] = fields[..] else {
            return Err(bad());
        };
        out.push(IndexEntry {
            node_id: node_id.to_string(),
            vm_id: vm_id.to_string(),
            tick: tick.parse().map_err(|_| bad())?,
            hash: hash.parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

#[derive(Clone, Debug)]
enum Backend {
    Disk(PathBuf),
    Memory(BTreeMap<Digest, (Vec<u8>, Vec<CustodyRecord>)>),
}

#[derive(Clone, Debug)]
pub struct EvidenceStore {
    backend: Backend,
    index: Vec<IndexEntry>,
}

impl EvidenceStore {
    pub fn in_memory() -> Self {
        Self {
            backend: Backend::Memory(BTreeMap::new()),
            index: Vec::new(),
        }
    }

    /// Opens (creating if needed) a store rooted at `root` and loads its index.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        let bundles = root.join("bundles");
        fs::create_dir_all(&bundles).map_err(io_err(&bundles))?;
        let index_path = root.join("index.tsv");
        let index = match fs::read_to_string(&index_path) {
            Ok(text) => parse_index(&text)?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(io_err(&index_path)(e)),
        };
        Ok(Self {
            backend: Backend::Disk(root),
            index,
        })
    }

    pub fn root(&self) -> Option<&Path> {
        match &self.backend {
            Backend::Disk(root) => Some(root),
            Backend::Memory(_) => None,
        }
    }

    /// Records the key custody chains are checked against, for offline
    /// verification. Leaves an existing file alone.
    pub fn record_trust_root(&self, publisher_pk: &PublicKey) -> Result<(), StoreError> {
        if let Backend::Disk(root) = &self.backend {
            let path = root.join("trust_root.pub");
            if !path.exists() {
                write_atomic(&path, format!("{}\n", publisher_pk.to_hex()).as_bytes())?;
            }
        }
        Ok(())
    }

    pub fn index(&self) -> &[IndexEntry] {
        &self.index
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn contains(&self, address: &Digest) -> bool {
        self.index.iter().any(|e| &e.hash == address)
    }

    /// Persists a bundle under its address. The caller has already checked
    /// custody; duplicates are rejected without touching the existing copy.
    pub fn put(&mut self, bundle: &EvidenceBundle) -> Result<Digest, StoreError> {
        let content = bundle.content_bytes();
        let address = hash_content(&content);
        if self.contains(&address) {
            return Err(StoreError::DuplicateBundle(address));
        }
        let entry = IndexEntry {
            node_id: bundle.meta.node_id.clone(),
            vm_id: bundle.meta.vm_id.clone(),
            tick: bundle.meta.halt_tick,
            hash: address,
        };
        match &mut self.backend {
            Backend::Disk(root) => {
                let dir = root.join("bundles");
                write_atomic(&dir.join(address.to_hex()), &content)?;
                write_atomic(
                    &dir.join(format!("{address}.custody")),
                    &crate::canonical::to_bytes(&bundle.custody),
                )?;
                let mut text: String = self.index.iter().map(|e| e.to_tsv() + "\n").collect();
                text.push_str(&entry.to_tsv());
                text.push('\n');
                write_atomic(&root.join("index.tsv"), text.as_bytes())?;
            }
            Backend::Memory(map) => {
                map.insert(address, (content, bundle.custody.clone()));
            }
        }
        self.index.push(entry);
        Ok(address)
    }

    pub fn get(&self, address: &Digest) -> Result<EvidenceBundle, StoreError> {
        let (content, custody) = match &self.backend {
            Backend::Disk(root) => read_disk_bundle(root, address)?,
            Backend::Memory(map) => map.get(address).cloned().ok_or(StoreError::BundleNotFound(*address))?,
        };
        EvidenceBundle::from_parts(&content, custody)
            .map_err(|e| StoreError::StoreUnreadable(format!("bundle {address}: {e}")))
    }

    pub fn append_custody(&mut self, address: &Digest, record: CustodyRecord) -> Result<(), StoreError> {
        match &mut self.backend {
            Backend::Disk(root) => {
                let (_, mut custody) = read_disk_bundle(root, address)?;
                custody.push(record);
                let path = root.join("bundles").join(format!("{address}.custody"));
                write_atomic(&path, &crate::canonical::to_bytes(&custody))
            }
            Backend::Memory(map) => {
                let (_, custody) = map.get_mut(address).ok_or(StoreError::BundleNotFound(*address))?;
                custody.push(record);
                Ok(())
            }
        }
    }
}

fn read_disk_bundle(root: &Path, address: &Digest) -> Result<(Vec<u8>, Vec<CustodyRecord>), StoreError> {
    let dir = root.join("bundles");
    let path = dir.join(address.to_hex());
    let content = match fs::read(&path) {
        Ok(c) => c,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(StoreError::BundleNotFound(*address)),
        Err(e) => return Err(io_err(&path)(e)),
    };
    let custody_path = dir.join(format!("{address}.custody"));
    let custody = match fs::read(&custody_path) {
        Ok(bytes) => crate::canonical::from_bytes(&bytes)
            .map_err(|e| StoreError::StoreUnreadable(format!("{}: {e}", custody_path.display())))?,
        Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(io_err(&custody_path)(e)),
    };
    Ok((content, custody))
}

/// Filter for [`evidence_list`]; the default matches everything.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EvidenceQuery {
    pub node_id: Option<String>,
    pub from_tick: Option<Tick>,
    pub to_tick: Option<Tick>,
}

impl EvidenceQuery {
    pub fn matches(&self, e: &IndexEntry) -> bool {
        self.node_id.as_ref().is_none_or(|n| n == &e.node_id)
            && self.from_tick.is_none_or(|t| e.tick >= t)
            && self.to_tick.is_none_or(|t| e.tick <= t)
    }
}

/// Index rows matching `query`, sorted by (tick, node_id).
pub fn evidence_list(root: &Path, query: &EvidenceQuery) -> Result<Vec<IndexEntry>, StoreError> {
    if !root.is_dir() {
        return Err(StoreError::StoreUnreadable(format!(
            "{} is not a directory",
            root.display()
        )));
    }
    let index_path = root.join("index.tsv");
    let text = match fs::read_to_string(&index_path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(StoreError::StoreUnreadable(format!("{}: {e}", index_path.display()))),
    };
    let mut rows: Vec<IndexEntry> = parse_index(&text)?.into_iter().filter(|e| query.matches(e)).collect();
    rows.sort_by(|a, b| (a.tick, &a.node_id, &a.vm_id).cmp(&(b.tick, &b.node_id, &b.vm_id)));
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
    Skipped,
}

impl CheckStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CheckStatus::Pass => "pass",
            CheckStatus::Fail => "fail",
            CheckStatus::Skipped => "skipped",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerificationReport {
    pub address: Digest,
    pub checks: Vec<(String, CheckStatus)>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|(_, s)| *s == CheckStatus::Pass)
    }

    pub fn to_kv(&self) -> String {
        let mut out = format!("bundle={}\n", self.address);
        for (name, status) in &self.checks {
            out.push_str(&format!("{name}={}\n", status.as_str()));
        }
        out.push_str(&format!("result={}\n", if self.passed() { "pass" } else { "fail" }));
        out
    }
}

/// Re-hashes a stored bundle and walks its custody chain against the
/// store's recorded trust root. Chain checks are skipped when the bytes
/// themselves are damaged.
pub fn evidence_verify(root: &Path, address: &Digest) -> Result<VerificationReport, StoreError> {
    let (content, custody) = read_disk_bundle(root, address)?;
    let mut checks = Vec::new();
    let content_ok = hash_content(&content) == *address;
    checks.push(("content_hash".to_string(), pass_fail(content_ok)));

    let parsed = if content_ok {
        EvidenceBundle::from_parts(&content, custody.clone()).ok()
    } else {
        None
    };
    let trust_root = fs::read_to_string(root.join("trust_root.pub"))
        .ok()
        .and_then(|s| s.trim().parse::<PublicKey>().ok());

    match (&parsed, &trust_root) {
        (Some(bundle), Some(pk)) => {
            checks.push(("snapshot_hash".to_string(), pass_fail(bundle.snapshot_intact())));
            checks.push(("custody_nonempty".to_string(), pass_fail(!custody.is_empty())));
            let status = verify_custody(*address, &custody, pk);
            for (i, (rec, ok)) in custody.iter().zip(status).enumerate() {
                checks.push((format!("custody.{i}.{:?}", rec.action), pass_fail(ok)));
            }
        }
        _ => {
            if content_ok {
                checks.push(("decode".to_string(), pass_fail(parsed.is_some())));
                checks.push(("trust_root".to_string(), pass_fail(trust_root.is_some())));
            }
            checks.push(("snapshot_hash".to_string(), CheckStatus::Skipped));
            for (i, rec) in custody.iter().enumerate() {
                checks.push((format!("custody.{i}.{:?}", rec.action), CheckStatus::Skipped));
            }
        }
    }
    Ok(VerificationReport {
        address: *address,
        checks,
    })
}

fn pass_fail(ok: bool) -> CheckStatus {
    if ok {
        CheckStatus::Pass
    } else {
        CheckStatus::Fail
    }
}
