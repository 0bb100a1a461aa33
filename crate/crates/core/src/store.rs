//! Content-addressed artifact store and execution ledger.
//!
//! On disk a store is laid out as
//!
//! ```text
//! objects/<2 hex>/<62 hex>   artifact bytes
//! meta/<2 hex>/<62 hex>      artifact provenance (JSON)
//! executions/<64 hex>        one ledger entry per execution identity (JSON)
//! runs/<run-id>/report       run reports
//! ```
//!
//! The in-memory backend keeps the same records without touching the
//! filesystem. Both backends serialize writes through one mutex; reads take
//! shared locks only.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::identity::{hash_content, ContentHash, ExecutionIdentity, IdentityError};
use crate::model::NodeId;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("artifact {0} not found")]
    NotFound(ContentHash),
    #[error("artifact {id} failed integrity check: stored bytes hash to {actual}")]
    IntegrityViolation { id: ContentHash, actual: ContentHash },
    #[error("identity conflict for {identity}: ledger holds artifact {existing}, new record has {attempted}")]
    IdentityConflict {
        identity: ContentHash,
        existing: ContentHash,
        attempted: ContentHash,
    },
    #[error("execution record references missing artifact {0}")]
    MissingArtifact(ContentHash),
    #[error("corrupt store entry {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error(transparent)]
    Identity(#[from] IdentityError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Work accounting for one execution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutionStats {
    /// Bytes in the resolved input surface.
    pub input_chars: u64,
    /// Bytes in the canonical output.
    pub output_chars: u64,
    pub synthesis_calls: u64,
    #[serde(rename = "elapsed_ns", with = "duration_nanos")]
    pub elapsed: Duration,
}

impl ExecutionStats {
    pub fn accumulate(&mut self, other: &ExecutionStats) {
        self.input_chars += other.input_chars;
        self.output_chars += other.output_chars;
        self.synthesis_calls += other.synthesis_calls;
        self.elapsed += other.elapsed;
    }
}

pub(crate) mod duration_nanos {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(u64::try_from(d.as_nanos()).unwrap_or(u64::MAX))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_nanos(u64::deserialize(d)?))
    }
}

/// How an artifact came to exist.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "origin", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Provenance {
    /// Output (canonical or candidate) of an execution.
    Produced { node: NodeId, identity: ContentHash },
    /// Content supplied by an artifact edit, replacing a node's output.
    Pinned { node: NodeId },
    /// Content supplied by a context edit.
    Context { node: NodeId, port: String },
}

impl Provenance {
    pub fn node(&self) -> &NodeId {
        match self {
            Self::Produced { node, .. } | Self::Pinned { node } | Self::Context { node, .. } => node,
        }
    }

    pub fn produced_under(&self) -> Option<ContentHash> {
        match self {
            Self::Produced { identity, .. } => Some(*identity),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArtifactMeta {
    content_type: String,
    provenance: Provenance,
    /// Informational; never hashed.
    created_at_ms: u64,
}

/// A stored artifact with its provenance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArtifactRecord {
    pub id: ContentHash,
    pub content: Vec<u8>,
    pub content_type: String,
    pub provenance: Provenance,
    pub created_at_ms: u64,
}

impl ArtifactRecord {
    pub fn producer(&self) -> &NodeId {
        self.provenance.node()
    }
}

/// What a node consumed through one of its ports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputRef {
    Artifact(ContentHash),
    Context(ContentHash),
}

impl InputRef {
    pub fn digest(&self) -> ContentHash {
        match self {
            Self::Artifact(h) | Self::Context(h) => *h,
        }
    }
}

/// Ledger entry: the outcome of executing one identity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutionRecord {
    pub identity: ExecutionIdentity,
    pub node: NodeId,
    pub canonical_artifact: ContentHash,
    pub candidate_artifacts: Vec<ContentHash>,
    pub input_surface: BTreeMap<String, InputRef>,
    pub stats: ExecutionStats,
}

impl ExecutionRecord {
    /// Same outcome, ignoring stats (elapsed time differs between runs).
    pub fn same_outcome(&self, other: &ExecutionRecord) -> bool {
        self.identity == other.identity
            && self.node == other.node
            && self.canonical_artifact == other.canonical_artifact
            && self.candidate_artifacts == other.candidate_artifacts
            && self.input_surface == other.input_surface
    }

    /// Canonical ledger file contents.
    pub fn to_canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("record serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

enum Backend {
    Memory(RwLock<HashMap<ContentHash, (ArtifactMeta, Vec<u8>)>>),
    Disk(PathBuf),
}

pub struct Store {
    backend: Backend,
    ledger: RwLock<HashMap<ContentHash, ExecutionRecord>>,
    runs: RwLock<BTreeMap<String, Vec<u8>>>,
    writes: Mutex<()>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match &self.backend {
            Backend::Memory(_) => "memory".to_string(),
            Backend::Disk(root) => root.display().to_string(),
        };
        f.debug_struct("Store").field("backend", &kind).finish_non_exhaustive()
    }
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

fn fanout(root: &Path, dir: &str, id: &ContentHash) -> PathBuf {
    let hex = id.to_hex();
    root.join(dir).join(&hex[..2]).join(&hex[2..])
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let parent = path.parent().expect("store paths have parents");
    fs::create_dir_all(parent).map_err(io_err(parent))?;
    let tmp = parent.join(format!(
        ".tmp-{}-{:?}-{}",
        std::process::id(),
        std::thread::current().id(),
        path.file_name().and_then(|n| n.to_str()).unwrap_or("entry")
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

impl Store {
    pub fn in_memory() -> Self {
        Self {
            backend: Backend::Memory(RwLock::new(HashMap::new())),
            ledger: RwLock::new(HashMap::new()),
            runs: RwLock::new(BTreeMap::new()),
            writes: Mutex::new(()),
        }
    }

    /// Opens (creating if needed) a store rooted at `root`, rebuilding the
    /// ledger and run indexes from disk.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, StoreError> {
        let root = root.as_ref().to_path_buf();
        for dir in ["objects", "meta", "executions", "runs"] {
            let p = root.join(dir);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        let store = Self {
            backend: Backend::Disk(root.clone()),
            ledger: RwLock::new(HashMap::new()),
            runs: RwLock::new(BTreeMap::new()),
            writes: Mutex::new(()),
        };
        *store.ledger.write().expect("ledger lock") = Self::load_ledger(&root)?;
        *store.runs.write().expect("runs lock") = Self::load_runs(&root)?;
        Ok(store)
    }

    fn load_ledger(root: &Path) -> Result<HashMap<ContentHash, ExecutionRecord>, StoreError> {
        let dir = root.join("executions");
        let mut out = HashMap::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let path = entry.map_err(io_err(&dir))?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
            if name.starts_with('.') {
                continue;
            }
            let corrupt = |reason: String| StoreError::Corrupt {
                path: path.clone(),
                reason,
            };
            let key: ContentHash = name.parse().map_err(|e| corrupt(format!("bad file name: {e}")))?;
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            let record = ExecutionRecord::from_json(&text).map_err(|e| corrupt(e.to_string()))?;
            record.identity.verify().map_err(|e| corrupt(e.to_string()))?;
            if record.identity.value != key {
                return Err(corrupt("file name does not match identity".into()));
            }
            out.insert(key, record);
        }
        Ok(out)
    }

    fn load_runs(root: &Path) -> Result<BTreeMap<String, Vec<u8>>, StoreError> {
        let dir = root.join("runs");
        let mut out = BTreeMap::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let path = entry.map_err(io_err(&dir))?.path();
            let report = path.join("report");
            if let (Some(id), true) = (path.file_name().and_then(|n| n.to_str()), report.is_file()) {
                out.insert(id.to_string(), fs::read(&report).map_err(io_err(&report))?);
            }
        }
        Ok(out)
    }

    pub fn root(&self) -> Option<&Path> {
        match &self.backend {
            Backend::Disk(root) => Some(root),
            Backend::Memory(_) => None,
        }
    }

    /// Path of an artifact's object file (disk stores only).
    pub fn object_path(&self, id: &ContentHash) -> Option<PathBuf> {
        self.root().map(|r| fanout(r, "objects", id))
    }

    pub fn contains_artifact(&self, id: &ContentHash) -> bool {
        match &self.backend {
            Backend::Memory(map) => map.read().expect("artifact lock").contains_key(id),
            Backend::Disk(root) => fanout(root, "objects", id).is_file(),
        }
    }

    /// Stores content at its hash. Re-putting existing content is a no-op and
    /// keeps the first provenance.
    pub fn put_artifact(
        &self,
        content: &[u8],
        content_type: &str,
        provenance: Provenance,
    ) -> Result<ContentHash, StoreError> {
        let id = hash_content(content);
        let meta = ArtifactMeta {
            content_type: content_type.to_string(),
            provenance,
            created_at_ms: now_ms(),
        };
        let _guard = self.writes.lock().expect("write lock");
        match &self.backend {
            Backend::Memory(map) => {
                map.write().expect("artifact lock").entry(id).or_insert_with(|| (meta, content.to_vec()));
            }
            Backend::Disk(root) => {
                let object = fanout(root, "objects", &id);
                if !object.is_file() {
                    let meta_json = serde_json::to_vec_pretty(&meta).expect("meta serializes");
                    write_atomic(&fanout(root, "meta", &id), &meta_json)?;
                    write_atomic(&object, content)?;
                }
            }
        }
        Ok(id)
    }

    /// Reads an artifact, verifying that its bytes still hash to its id.
    pub fn get_artifact(&self, id: &ContentHash) -> Result<ArtifactRecord, StoreError> {
        let (meta, content) = match &self.backend {
            Backend::Memory(map) => map.read().expect("artifact lock").get(id).cloned().ok_or(StoreError::NotFound(*id))?,
            Backend::Disk(root) => {
                let object = fanout(root, "objects", id);
                let content = match fs::read(&object) {
                    Ok(c) => c,
                    Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(StoreError::NotFound(*id)),
                    Err(e) => return Err(io_err(&object)(e)),
                };
                let meta_path = fanout(root, "meta", id);
                let text = fs::read(&meta_path).map_err(io_err(&meta_path))?;
                let meta: ArtifactMeta = serde_json::from_slice(&text).map_err(|e| StoreError::Corrupt {
                    path: meta_path.clone(),
                    reason: e.to_string(),
                })?;
                (meta, content)
            }
        };
        let actual = hash_content(&content);
        if actual != *id {
            return Err(StoreError::IntegrityViolation { id: *id, actual });
        }
        Ok(ArtifactRecord {
            id: *id,
            content,
            content_type: meta.content_type,
            provenance: meta.provenance,
            created_at_ms: meta.created_at_ms,
        })
    }

    pub fn artifact_count(&self) -> usize {
        match &self.backend {
            Backend::Memory(map) => map.read().expect("artifact lock").len(),
            Backend::Disk(root) => count_files(&root.join("objects")),
        }
    }

    /// Appends an execution record. Identical re-records are accepted without
    /// rewriting; a different outcome under a recorded identity is rejected.
    pub fn record_execution(&self, record: &ExecutionRecord) -> Result<(), StoreError> {
        record.identity.verify()?;
        for id in std::iter::once(&record.canonical_artifact).chain(&record.candidate_artifacts) {
            if !self.contains_artifact(id) {
                return Err(StoreError::MissingArtifact(*id));
            }
        }
        let _guard = self.writes.lock().expect("write lock");
        let key = record.identity.value;
        if let Some(existing) = self.ledger.read().expect("ledger lock").get(&key) {
            if existing.same_outcome(record) {
                return Ok(());
            }
            return Err(StoreError::IdentityConflict {
                identity: key,
                existing: existing.canonical_artifact,
                attempted: record.canonical_artifact,
            });
        }
        if let Backend::Disk(root) = &self.backend {
            write_atomic(&root.join("executions").join(key.to_hex()), record.to_canonical_json().as_bytes())?;
        }
        self.ledger.write().expect("ledger lock").insert(key, record.clone());
        Ok(())
    }

    pub fn lookup_by_identity(&self, identity: &ContentHash) -> Option<ExecutionRecord> {
        self.ledger.read().expect("ledger lock").get(identity).cloned()
    }

    pub fn execution_count(&self) -> usize {
        self.ledger.read().expect("ledger lock").len()
    }

    /// Every ledger record, sorted by identity.
    pub fn execution_records(&self) -> Vec<ExecutionRecord> {
        let mut v: Vec<ExecutionRecord> = self.ledger.read().expect("ledger lock").values().cloned().collect();
        v.sort_by_key(|r| r.identity.value);
        v
    }

    /// Records whose canonical artifact is `artifact`, sorted by identity.
    pub fn records_producing(&self, artifact: &ContentHash) -> Vec<ExecutionRecord> {
        let mut v: Vec<ExecutionRecord> = self
            .ledger
            .read()
            .expect("ledger lock")
            .values()
            .filter(|r| r.canonical_artifact == *artifact)
            .cloned()
            .collect();
        v.sort_by_key(|r| r.identity.value);
        v
    }

    /// Reserves the next sequential run id (`run-000001`, ...).
    pub fn allocate_run_id(&self) -> Result<String, StoreError> {
        let _guard = self.writes.lock().expect("write lock");
        let mut runs = self.runs.write().expect("runs lock");
        let next = runs
            .keys()
            .filter_map(|k| k.strip_prefix("run-").and_then(|n| n.parse::<u64>().ok()))
            .max()
            .unwrap_or(0)
            + 1;
        let id = format!("run-{next:06}");
        runs.insert(id.clone(), Vec::new());
        Ok(id)
    }

    /// Persists a run report; returns its path for disk stores.
    pub fn save_run_report(&self, run_id: &str, report: &[u8]) -> Result<Option<PathBuf>, StoreError> {
        let _guard = self.writes.lock().expect("write lock");
        let path = match &self.backend {
            Backend::Disk(root) => {
                let p = root.join("runs").join(run_id).join("report");
                write_atomic(&p, report)?;
                Some(p)
            }
            Backend::Memory(_) => None,
        };
        self.runs.write().expect("runs lock").insert(run_id.to_string(), report.to_vec());
        Ok(path)
    }

    pub fn run_report(&self, run_id: &str) -> Option<Vec<u8>> {
        self.runs.read().expect("runs lock").get(run_id).filter(|r| !r.is_empty()).cloned()
    }

    /// Run ids with saved reports, oldest first.
    pub fn run_ids(&self) -> Vec<String> {
        self.runs
            .read()
            .expect("runs lock")
            .iter()
            .filter(|(_, r)| !r.is_empty())
            .map(|(k, _)| k.clone())
            .collect()
    }
}

fn count_files(dir: &Path) -> usize {
    let Ok(entries) = fs::read_dir(dir) else { return 0 };
    entries
        .filter_map(Result::ok)
        .map(|e| {
            let p = e.path();
            if p.is_dir() {
                count_files(&p)
            } else if p.file_name().and_then(|n| n.to_str()).is_some_and(|n| !n.starts_with('.')) {
                1
            } else {
                0
            }
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::compute_execution_identity;

    fn produced(node: &str) -> Provenance {
        Provenance::Produced {
            node: node.into(),
            identity: hash_content(b"identity"),
        }
    }

    fn record(store: &Store, content: &[u8], seed: &[u8]) -> ExecutionRecord {
        let identity = compute_execution_identity(hash_content(seed), hash_content(b"in"), BTreeMap::new());
        let id = store.put_artifact(content, "text", produced("n")).unwrap();
        ExecutionRecord {
            identity,
            node: "n".into(),
            canonical_artifact: id,
            candidate_artifacts: vec![id],
            input_surface: [("p".to_string(), InputRef::Context(hash_content(b"ctx")))].into(),
            stats: ExecutionStats {
                input_chars: 3,
                output_chars: content.len() as u64,
                synthesis_calls: 1,
                elapsed: Duration::from_micros(17),
            },
        }
    }

    fn both() -> Vec<(Store, Option<tempfile::TempDir>)> {
        let dir = tempfile::tempdir().unwrap();
        vec![(Store::in_memory(), None), (Store::open(dir.path()).unwrap(), Some(dir))]
    }

    #[test]
    fn put_is_content_addressed_and_idempotent() {
        for (store, _dir) in both() {
            let a = store.put_artifact(b"abc", "text", produced("x")).unwrap();
            let b = store.put_artifact(b"abc", "text", produced("y")).unwrap();
            assert_eq!(a.to_hex(), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
            assert_eq!(a, b);
            assert_eq!(store.artifact_count(), 1);
            assert_eq!(store.get_artifact(&a).unwrap().producer().as_str(), "x");
            store.put_artifact(b"abd", "text", produced("x")).unwrap();
            assert_eq!(store.artifact_count(), 2);
        }
    }

    #[test]
    fn disk_layout_fans_out_objects() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        store.put_artifact(b"one", "text", produced("x")).unwrap();
        store.put_artifact(b"two", "text", produced("x")).unwrap();
        let mut files = Vec::new();
        for shard in fs::read_dir(dir.path().join("objects")).unwrap() {
            let shard = shard.unwrap().path();
            assert_eq!(shard.file_name().unwrap().len(), 2);
            for f in fs::read_dir(&shard).unwrap() {
                let f = f.unwrap().path();
                assert_eq!(f.file_name().unwrap().len(), 62);
                files.push(f);
            }
        }
        assert_eq!(files.len(), 2);
    }

    #[test]
    fn get_round_trips_and_reports_missing() {
        for (store, _dir) in both() {
            let id = store.put_artifact(b"payload", "text", produced("x")).unwrap();
            let rec = store.get_artifact(&id).unwrap();
            assert_eq!(rec.content, b"payload");
            assert_eq!(rec.content_type, "text");
            assert!(matches!(store.get_artifact(&hash_content(b"other")), Err(StoreError::NotFound(_))));
        }
    }

    #[test]
    fn tampered_object_fails_integrity() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let id = store.put_artifact(b"payload", "text", produced("x")).unwrap();
        let path = store.object_path(&id).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 0x01;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(store.get_artifact(&id), Err(StoreError::IntegrityViolation { .. })));
    }

    #[test]
    fn ledger_idempotence_and_conflicts() {
        for (store, _dir) in both() {
            let r = record(&store, b"out", b"spec");
            assert!(store.lookup_by_identity(&r.identity.value).is_none());
            store.record_execution(&r).unwrap();
            assert_eq!(store.lookup_by_identity(&r.identity.value), Some(r.clone()));

            let mut again = r.clone();
            again.stats.elapsed = Duration::from_secs(1);
            store.record_execution(&again).unwrap();
            assert_eq!(store.execution_count(), 1);

            let mut conflicting = r.clone();
            let other = store.put_artifact(b"different", "text", produced("n")).unwrap();
            conflicting.canonical_artifact = other;
            conflicting.candidate_artifacts = vec![other];
            assert!(matches!(store.record_execution(&conflicting), Err(StoreError::IdentityConflict { .. })));
        }
    }

    #[test]
    fn lookup_misses_on_any_flipped_bit() {
        let store = Store::in_memory();
        let r = record(&store, b"out", b"spec");
        store.record_execution(&r).unwrap();
        let bytes = *r.identity.value.as_bytes();
        for i in 0..32 {
            let mut b = bytes;
            b[i] ^= 0x80;
            assert!(store.lookup_by_identity(&ContentHash::from_bytes(b)).is_none());
        }
    }

    #[test]
    fn record_requires_artifacts() {
        let store = Store::in_memory();
        let mut r = record(&store, b"out", b"spec");
        r.canonical_artifact = hash_content(b"never stored");
        assert!(matches!(store.record_execution(&r), Err(StoreError::MissingArtifact(_))));
    }

    #[test]
    fn ledger_reloads_from_disk_and_entries_are_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let r1 = record(&store, b"one", b"a");
        let r2 = record(&store, b"two", b"b");
        store.record_execution(&r1).unwrap();
        store.record_execution(&r2).unwrap();
        let run = store.allocate_run_id().unwrap();
        store.save_run_report(&run, b"report\n").unwrap();

        let reopened = Store::open(dir.path()).unwrap();
        assert_eq!(reopened.execution_records(), store.execution_records());
        assert_eq!(reopened.run_ids(), vec![run.clone()]);
        assert_eq!(reopened.run_report(&run).unwrap(), b"report\n");
        assert_eq!(reopened.allocate_run_id().unwrap(), "run-000002");

        let path = dir.path().join("executions").join(r1.identity.value.to_hex());
        let text = fs::read_to_string(path).unwrap();
        let parsed = ExecutionRecord::from_json(&text).unwrap();
        assert_eq!(parsed.to_canonical_json(), text);
    }

    #[test]
    fn concurrent_identical_writes_are_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let r = record(&store, b"shared", b"spec");
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    store.put_artifact(b"shared", "text", produced("n")).unwrap();
                    store.record_execution(&r).unwrap();
                });
            }
        });
        assert_eq!(store.artifact_count(), 1);
        assert_eq!(store.execution_count(), 1);
    }
}
