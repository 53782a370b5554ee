//! Filesystem-backed, content-addressed response cache.
//!
//! Layout under the cache root:
//!
//! ```text
//! schema_version            "1"
//! index.jsonl               append-only journal, one line per stored entry
//! <role>/<endpoint-tag>/<request-digest-hex>.json
//! ```
//!
//! `endpoint-tag` is the first 16 hex characters of the SHA-256 of the
//! endpoint id. Entries are written to a temporary file and linked into
//! place without clobbering, so concurrent writers (threads or processes)
//! never observe a partial entry.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::backends::BackendRole;
use crate::digest::Digest;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("cache i/o at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("corrupt cache entry {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("cache schema version {found} at {path} is not supported (expected {SCHEMA_VERSION})")]
    Schema { path: PathBuf, found: String },
    #[error("conflicting response already cached for {role} request {digest} at {endpoint}")]
    Integrity { role: BackendRole, endpoint: String, digest: Digest },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub digest: Digest,
    pub role: BackendRole,
    pub endpoint: String,
    pub created_at: DateTime<Utc>,
    #[serde(serialize_with = "ser_b64", deserialize_with = "de_b64")]
    pub response: Vec<u8>,
}

impl CacheEntry {
    pub fn new(role: BackendRole, endpoint: impl Into<String>, digest: Digest, response: Vec<u8>) -> Self {
        Self { digest, role, endpoint: endpoint.into(), created_at: Utc::now(), response }
    }
}

fn ser_b64<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&BASE64.encode(bytes))
}

fn de_b64<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
    let s = String::deserialize(d)?;
    BASE64.decode(s).map_err(serde::de::Error::custom)
}

#[derive(Serialize)]
struct JournalLine<'a> {
    digest: Digest,
    role: BackendRole,
    endpoint: &'a str,
    created_at: DateTime<Utc>,
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    root: PathBuf,
    cross_endpoint: bool,
}

impl ResponseCache {
    /// Opens (creating if needed) a cache rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        let version_path = root.join("schema_version");
        match fs::read_to_string(&version_path) {
            Ok(found) => {
                if found.trim() != SCHEMA_VERSION.to_string() {
                    return Err(StoreError::Schema { path: version_path, found: found.trim().into() });
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                write_atomic(&version_path, format!("{SCHEMA_VERSION}\n").as_bytes(), true)?;
            }
            Err(e) => return Err(StoreError::Io { path: version_path, source: e }),
        }
        Ok(Self { root, cross_endpoint: false })
    }

    /// Allow hits recorded against a different endpoint id.
    pub fn with_cross_endpoint(mut self, allow: bool) -> Self {
        self.cross_endpoint = allow;
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn role_dir(&self, role: BackendRole) -> PathBuf {
        self.root.join(role.as_str())
    }

    fn entry_path(&self, role: BackendRole, endpoint: &str, digest: &Digest) -> PathBuf {
        let tag = &Digest::of(endpoint.as_bytes()).to_hex()[..16];
        self.role_dir(role).join(tag).join(format!("{}.json", digest.to_hex()))
    }

    fn read_entry(path: &Path) -> Result<Option<CacheEntry>, StoreError> {
        match fs::read(path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| StoreError::Corrupt { path: path.to_path_buf(), reason: e.to_string() }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(StoreError::Io { path: path.to_path_buf(), source: e }),
        }
    }

    pub fn get(
        &self,
        role: BackendRole,
        endpoint: &str,
        digest: &Digest,
    ) -> Result<Option<Vec<u8>>, StoreError> {
        let path = self.entry_path(role, endpoint, digest);
        if let Some(entry) = Self::read_entry(&path)? {
            if entry.digest != *digest || entry.endpoint != endpoint || entry.role != role {
                return Err(StoreError::Corrupt { path, reason: "entry key mismatch".into() });
            }
            return Ok(Some(entry.response));
        }
        if !self.cross_endpoint {
            return Ok(None);
        }
        let role_dir = self.role_dir(role);
        let dirs = match fs::read_dir(&role_dir) {
            Ok(d) => d,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(StoreError::Io { path: role_dir, source: e }),
        };
        let mut candidates: Vec<PathBuf> = dirs
            .filter_map(|d| d.ok())
            .map(|d| d.path().join(format!("{}.json", digest.to_hex())))
            .collect();
        candidates.sort();
        for path in candidates {
            if let Some(entry) = Self::read_entry(&path)? {
                return Ok(Some(entry.response));
            }
        }
        Ok(None)
    }

    /// Stores an entry. Re-putting identical bytes is a no-op; different
    /// bytes under the same key is an integrity error.
    pub fn put(&self, entry: &CacheEntry) -> Result<(), StoreError> {
        let path = self.entry_path(entry.role, &entry.endpoint, &entry.digest);
        let integrity = || StoreError::Integrity {
            role: entry.role,
            endpoint: entry.endpoint.clone(),
            digest: entry.digest,
        };
        if let Some(existing) = Self::read_entry(&path)? {
            return if existing.response == entry.response { Ok(()) } else { Err(integrity()) };
        }
        let dir = path.parent().expect("entry path has a parent");
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let body = serde_json::to_vec(entry).expect("cache entries serialize");
        if !write_atomic(&path, &body, false)? {
            // Lost a race with another writer of the same key.
            let existing = Self::read_entry(&path)?.ok_or_else(|| StoreError::Corrupt {
                path: path.clone(),
                reason: "entry vanished after concurrent write".into(),
            })?;
            return if existing.response == entry.response { Ok(()) } else { Err(integrity()) };
        }
        self.journal(entry)
    }

    fn journal(&self, entry: &CacheEntry) -> Result<(), StoreError> {
        let path = self.root.join("index.jsonl");
        let mut line = serde_json::to_string(&JournalLine {
            digest: entry.digest,
            role: entry.role,
            endpoint: &entry.endpoint,
            created_at: entry.created_at,
        })
        .expect("journal line serializes");
        line.push('\n');
        let mut file =
            fs::OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
        file.write_all(line.as_bytes()).map_err(io_err(&path))
    }

    /// Number of stored entries, counted from the directory tree.
    pub fn len(&self) -> Result<usize, StoreError> {
        let mut n = 0;
        for role in BackendRole::ALL {
            let dir = self.role_dir(role);
            let Ok(endpoints) = fs::read_dir(&dir) else { continue };
            for ep in endpoints.filter_map(|e| e.ok()) {
                let files = fs::read_dir(ep.path()).map_err(io_err(&dir))?;
                n += files
                    .filter_map(|f| f.ok())
                    .filter(|f| f.path().extension().is_some_and(|e| e == "json"))
                    .count();
            }
        }
        Ok(n)
    }

    pub fn is_empty(&self) -> Result<bool, StoreError> {
        Ok(self.len()? == 0)
    }

    /// Removes every entry and the journal, keeping the schema marker.
    pub fn clear(&self) -> Result<(), StoreError> {
        for role in BackendRole::ALL {
            let dir = self.role_dir(role);
            match fs::remove_dir_all(&dir) {
                Ok(()) => {}
                Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                Err(e) => return Err(StoreError::Io { path: dir, source: e }),
            }
        }
        let journal = self.root.join("index.jsonl");
        match fs::remove_file(&journal) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(StoreError::Io { path: journal, source: e }),
        }
    }
}

/// Writes through a temp file in the target directory. With `clobber`
/// false, returns `Ok(false)` when the target already exists.
fn write_atomic(path: &Path, bytes: &[u8], clobber: bool) -> Result<bool, StoreError> {
    let dir = path.parent().expect("path has a parent");
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_data().map_err(io_err(path))?;
    let result = if clobber { tmp.persist(path) } else { tmp.persist_noclobber(path) };
    match result {
        Ok(_) => Ok(true),
        Err(e) if !clobber && e.error.kind() == io::ErrorKind::AlreadyExists => Ok(false),
        Err(e) => Err(StoreError::Io { path: path.to_path_buf(), source: e.error }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn entry(endpoint: &str, key: &str, body: &str) -> CacheEntry {
        CacheEntry::new(BackendRole::TextLlm, endpoint, Digest::of(key.as_bytes()), body.as_bytes().to_vec())
    }

    #[test]
    fn miss_on_empty_store() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        assert_eq!(cache.get(BackendRole::TextLlm, "ep", &Digest::of(b"k")).unwrap(), None);
        assert!(cache.is_empty().unwrap());
    }

    #[test]
    fn put_get_round_trip_and_restart() {
        let dir = tempfile::tempdir().unwrap();
        let e = entry("http://a", "k", "{\"x\":1}");
        {
            let cache = ResponseCache::open(dir.path()).unwrap();
            cache.put(&e).unwrap();
            assert_eq!(cache.get(e.role, "http://a", &e.digest).unwrap(), Some(e.response.clone()));
        }
        let reopened = ResponseCache::open(dir.path()).unwrap();
        assert_eq!(reopened.get(e.role, "http://a", &e.digest).unwrap(), Some(e.response.clone()));
        assert_eq!(fs::read_to_string(dir.path().join("schema_version")).unwrap().trim(), "1");
        let journal = fs::read_to_string(dir.path().join("index.jsonl")).unwrap();
        assert_eq!(journal.lines().count(), 1);
        assert!(dir.path().join("text_llm").is_dir());
    }

    #[test]
    fn endpoint_isolation() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let e = entry("http://a", "k", "r");
        cache.put(&e).unwrap();
        assert_eq!(cache.get(e.role, "http://b", &e.digest).unwrap(), None);
        let shared = cache.clone().with_cross_endpoint(true);
        assert_eq!(shared.get(e.role, "http://b", &e.digest).unwrap(), Some(b"r".to_vec()));
        assert_eq!(cache.get(BackendRole::Captioner, "http://a", &e.digest).unwrap(), None);
    }

    #[test]
    fn duplicate_put_is_noop_and_conflict_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        cache.put(&entry("ep", "k", "same")).unwrap();
        cache.put(&entry("ep", "k", "same")).unwrap();
        assert_eq!(cache.len().unwrap(), 1);
        let err = cache.put(&entry("ep", "k", "different")).unwrap_err();
        assert!(matches!(err, StoreError::Integrity { .. }));
    }

    #[test]
    fn unsupported_schema_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("schema_version"), "7\n").unwrap();
        assert!(matches!(ResponseCache::open(dir.path()), Err(StoreError::Schema { .. })));
    }

    #[test]
    fn clear_empties_store() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        cache.put(&entry("ep", "a", "1")).unwrap();
        cache.put(&entry("ep", "b", "2")).unwrap();
        assert_eq!(cache.len().unwrap(), 2);
        cache.clear().unwrap();
        assert!(cache.is_empty().unwrap());
        assert!(ResponseCache::open(dir.path()).is_ok());
    }

    #[test]
    fn concurrent_distinct_puts_all_retrievable() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(ResponseCache::open(dir.path()).unwrap());
        let threads: Vec<_> = (0..8)
            .map(|t| {
                let cache = Arc::clone(&cache);
                std::thread::spawn(move || {
                    for i in (t..1000).step_by(8) {
                        cache.put(&entry("ep", &format!("key{i}"), &format!("value{i}"))).unwrap();
                    }
                })
            })
            .collect();
        for t in threads {
            t.join().unwrap();
        }
        for i in 0..1000 {
            let d = Digest::of(format!("key{i}").as_bytes());
            assert_eq!(
                cache.get(BackendRole::TextLlm, "ep", &d).unwrap(),
                Some(format!("value{i}").into_bytes())
            );
        }
        let journal = fs::read_to_string(dir.path().join("index.jsonl")).unwrap();
        assert_eq!(journal.lines().count(), 1000);
    }

    #[test]
    fn concurrent_same_key_puts_converge() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(ResponseCache::open(dir.path()).unwrap());
        let threads: Vec<_> = (0..8)
            .map(|_| {
                let cache = Arc::clone(&cache);
                std::thread::spawn(move || cache.put(&entry("ep", "shared", "v")))
            })
            .collect();
        for t in threads {
            t.join().unwrap().unwrap();
        }
        assert_eq!(cache.len().unwrap(), 1);
    }
}
