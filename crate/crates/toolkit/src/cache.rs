//! On-disk response cache: one JSON file per request fingerprint.
//!
//! Entries never expire. Namespaces are subdirectories, used to keep
//! repeated benchmark runs independent of each other.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use m3cot_core::chat::Usage;
use serde::{Deserialize, Serialize};

use crate::util::write_atomic;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub request_digest: String,
    pub text: String,
    #[serde(default)]
    pub usage: Usage,
    pub created_at: String,
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    root: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct NamespaceStats {
    pub entries: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub entries: u64,
    pub bytes: u64,
    pub namespaces: BTreeMap<String, NamespaceStats>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct GcReport {
    pub removed_temp_files: u64,
    pub removed_corrupt: u64,
    pub removed_namespaces: Vec<String>,
}

fn is_fingerprint(name: &str) -> bool {
    name.len() == 64 && name.bytes().all(|b| b.is_ascii_hexdigit())
}

impl ResponseCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, namespace: Option<&str>, fingerprint: &str) -> PathBuf {
        let dir = match namespace {
            Some(ns) => self.root.join(ns),
            None => self.root.clone(),
        };
        dir.join(format!("{fingerprint}.json"))
    }

    /// A readable entry whose digest matches; anything else is a miss.
    pub fn get(&self, namespace: Option<&str>, fingerprint: &str) -> Option<CacheEntry> {
        let path = self.path_for(namespace, fingerprint);
        let bytes = fs::read(&path).ok()?;
        match serde_json::from_slice::<CacheEntry>(&bytes) {
            Ok(e) if e.request_digest == fingerprint => Some(e),
            Ok(_) => {
                tracing::warn!(path = %path.display(), "cache entry digest does not match its file name");
                None
            }
            Err(err) => {
                tracing::warn!(path = %path.display(), %err, "unreadable cache entry treated as a miss");
                None
            }
        }
    }

    pub fn put(&self, namespace: Option<&str>, entry: &CacheEntry) -> io::Result<()> {
        let path = self.path_for(namespace, &entry.request_digest);
        let mut bytes = serde_json::to_vec_pretty(entry).map_err(io::Error::other)?;
        bytes.push(b'\n');
        write_atomic(&path, &bytes)
    }

    fn visit(&self, mut f: impl FnMut(&str, &Path, &str)) -> io::Result<()> {
        if !self.root.exists() {
            return Ok(());
        }
        let mut dirs = vec![(String::new(), self.root.clone())];
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            if entry.file_type()?.is_dir() {
                dirs.push((entry.file_name().to_string_lossy().into_owned(), entry.path()));
            }
        }
        for (ns, dir) in dirs {
            for entry in fs::read_dir(&dir)? {
                let entry = entry?;
                if entry.file_type()?.is_file() {
                    let name = entry.file_name().to_string_lossy().into_owned();
                    f(&ns, &entry.path(), &name);
                }
            }
        }
        Ok(())
    }

    pub fn stats(&self) -> io::Result<CacheStats> {
        let mut s = CacheStats::default();
        self.visit(|ns, path, name| {
            let Some(stem) = name.strip_suffix(".json") else { return };
            if !is_fingerprint(stem) {
                return;
            }
            let len = fs::metadata(path).map(|m| m.len()).unwrap_or(0);
            s.entries += 1;
            s.bytes += len;
            let label = if ns.is_empty() { "(root)".to_string() } else { ns.to_string() };
            let n = s.namespaces.entry(label).or_default();
            n.entries += 1;
            n.bytes += len;
        })?;
        Ok(s)
    }

    /// Remove leftover temp files and entries that no longer parse, plus the
    /// named namespaces.
    pub fn gc(&self, drop_namespaces: &[String]) -> io::Result<GcReport> {
        let mut report = GcReport::default();
        for ns in drop_namespaces {
            let dir = self.root.join(ns);
            if ns.contains(['/', '\\']) || ns == ".." || ns.is_empty() {
                return Err(io::Error::new(io::ErrorKind::InvalidInput, format!("bad namespace `{ns}`")));
            }
            if dir.is_dir() {
                fs::remove_dir_all(&dir)?;
                report.removed_namespaces.push(ns.clone());
            }
        }
        let mut doomed = Vec::new();
        self.visit(|_, path, name| {
            if name.starts_with('.') && name.contains(".tmp-") {
                doomed.push((path.to_path_buf(), true));
            } else if let Some(stem) = name.strip_suffix(".json").filter(|s| is_fingerprint(s)) {
                let ok = fs::read(path)
                    .ok()
                    .and_then(|b| serde_json::from_slice::<CacheEntry>(&b).ok())
                    .is_some_and(|e| e.request_digest == stem);
                if !ok {
                    doomed.push((path.to_path_buf(), false));
                }
            }
        })?;
        for (path, temp) in doomed {
            fs::remove_file(&path)?;
            if temp {
                report.removed_temp_files += 1;
            } else {
                report.removed_corrupt += 1;
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(fp: &str) -> CacheEntry {
        CacheEntry { request_digest: fp.into(), text: "B)".into(), usage: Usage::default(), created_at: "t".into() }
    }

    #[test]
    fn round_trip_namespaces_and_gc() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path());
        let fp = "a".repeat(64);
        assert!(cache.get(None, &fp).is_none());
        cache.put(None, &entry(&fp)).unwrap();
        cache.put(Some("run-1"), &entry(&fp)).unwrap();
        assert_eq!(cache.get(None, &fp).unwrap().text, "B)");
        assert!(cache.get(Some("run-2"), &fp).is_none());
        let stats = cache.stats().unwrap();
        assert_eq!(stats.entries, 2);
        assert_eq!(stats.namespaces.len(), 2);

        let bad = "b".repeat(64);
        fs::write(cache.path_for(None, &bad), "{not json").unwrap();
        fs::write(dir.path().join(".x.json.tmp-1-1"), "partial").unwrap();
        assert!(cache.get(None, &bad).is_none());
        let report = cache.gc(&["run-1".to_string()]).unwrap();
        assert_eq!(report.removed_corrupt, 1);
        assert_eq!(report.removed_temp_files, 1);
        assert_eq!(report.removed_namespaces, vec!["run-1"]);
        assert_eq!(cache.stats().unwrap().entries, 1);
    }

    #[test]
    fn digest_mismatch_is_a_miss() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path());
        let fp = "c".repeat(64);
        let mut e = entry(&fp);
        cache.put(None, &e).unwrap();
        e.request_digest = "d".repeat(64);
        fs::write(cache.path_for(None, &fp), serde_json::to_vec(&e).unwrap()).unwrap();
        assert!(cache.get(None, &fp).is_none());
    }
}
