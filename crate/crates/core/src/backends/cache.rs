//! Content-addressed on-disk cache of backend responses.
//!
//! Entries live at `<dir>/entries/<2 hex>/<64 hex>.json`, keyed by the
//! SHA-256 of the backend identity, the call kind, the system line, the
//! rendered prompt and the image digest. Writes go through a temp file and
//! an atomic rename under a process-wide mutex, so readers never observe a
//! partial entry and a write is visible to the next read.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelBackend, Request, YesNoLogits};
use crate::error::{Error, Result};

const ENTRIES: &str = "entries";
const LAST_RUN: &str = "last_run.json";

/// Floats are stored as raw bits so warm reads are bit-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CachedValue {
    Logits { yes_bits: u64, no_bits: u64 },
    Text { text: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub value: CachedValue,
    pub created_at: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub entries: usize,
    pub hits: u64,
    pub misses: u64,
}

impl CacheStats {
    pub fn hit_rate(&self) -> f64 {
        let total = self.hits + self.misses;
        if total == 0 {
            0.0
        } else {
            self.hits as f64 / total as f64
        }
    }
}

#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
    hits: AtomicU64,
    misses: AtomicU64,
    tmp_counter: AtomicU64,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(dir.join(ENTRIES)).map_err(|e| Error::Cache {
            path: dir.clone(),
            message: format!("cannot create cache directory: {e}"),
        })?;
        Ok(Self {
            dir,
            write_lock: Mutex::new(()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            tmp_counter: AtomicU64::new(0),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(identity: &str, kind: &str, request: &Request) -> Result<String> {
        let mut h = Sha256::new();
        for part in [
            identity,
            kind,
            request.system.as_deref().unwrap_or(""),
            &request.prompt.text,
        ] {
            h.update(part.as_bytes());
            h.update([0]);
        }
        if let Some(img) = &request.prompt.image {
            h.update(img.digest()?.as_bytes());
        }
        Ok(hex::encode(h.finalize()))
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(ENTRIES).join(&key[..2]).join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Option<CachedValue> {
        let path = self.path_for(key);
        let found = std::fs::read(&path).ok().and_then(|bytes| {
            match serde_json::from_slice::<CacheEntry>(&bytes) {
                Ok(entry) if entry.key == key => Some(entry.value),
                _ => {
                    log::warn!("ignoring corrupt cache entry {}", path.display());
                    None
                }
            }
        });
        if found.is_some() {
            self.hits.fetch_add(1, Ordering::Relaxed);
        } else {
            self.misses.fetch_add(1, Ordering::Relaxed);
        }
        found
    }

    pub fn put(&self, key: &str, value: CachedValue) -> Result<()> {
        let entry = CacheEntry {
            key: key.to_owned(),
            value,
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let bytes = serde_json::to_vec(&entry)?;
        let path = self.path_for(key);
        let io_err = |e: std::io::Error| Error::Cache {
            path: path.clone(),
            message: e.to_string(),
        };
        let _guard = self.write_lock.lock().unwrap_or_else(|p| p.into_inner());
        let parent = path.parent().expect("entry path has a parent");
        std::fs::create_dir_all(parent).map_err(io_err)?;
        let tmp = parent.join(format!(
            ".{key}.{}.{}.tmp",
            std::process::id(),
            self.tmp_counter.fetch_add(1, Ordering::Relaxed)
        ));
        std::fs::write(&tmp, &bytes).map_err(io_err)?;
        std::fs::rename(&tmp, &path).map_err(io_err)?;
        Ok(())
    }

    pub fn entry_count(&self) -> usize {
        count_entries(&self.dir)
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            entries: self.entry_count(),
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
        }
    }

    /// Records this process's hit/miss counters as the "last run".
    pub fn persist_stats(&self) -> Result<()> {
        let stats = self.stats();
        let path = self.dir.join(LAST_RUN);
        std::fs::write(&path, serde_json::to_vec_pretty(&stats)?).map_err(|e| Error::Cache {
            path,
            message: e.to_string(),
        })
    }

    /// Stats for a directory without opening it for writing.
    pub fn inspect(dir: &Path) -> CacheStats {
        let last: CacheStats = std::fs::read(dir.join(LAST_RUN))
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok())
            .unwrap_or_default();
        CacheStats {
            entries: count_entries(dir),
            ..last
        }
    }

    /// Removes every entry and the last-run record.
    pub fn clear(dir: &Path) -> Result<()> {
        let err = |e: std::io::Error| Error::Cache {
            path: dir.to_path_buf(),
            message: e.to_string(),
        };
        let entries = dir.join(ENTRIES);
        if entries.exists() {
            std::fs::remove_dir_all(&entries).map_err(err)?;
        }
        let last = dir.join(LAST_RUN);
        if last.exists() {
            std::fs::remove_file(&last).map_err(err)?;
        }
        std::fs::create_dir_all(&entries).map_err(err)?;
        Ok(())
    }
}

fn count_entries(dir: &Path) -> usize {
    let Ok(shards) = std::fs::read_dir(dir.join(ENTRIES)) else {
        return 0;
    };
    shards
        .filter_map(|s| s.ok())
        .filter_map(|s| std::fs::read_dir(s.path()).ok())
        .flat_map(|files| files.filter_map(|f| f.ok()))
        .filter(|f| f.path().extension().is_some_and(|e| e == "json"))
        .count()
}

/// Wraps a backend so every answer is served from, or stored into, a cache.
pub struct CachedBackend<B> {
    inner: B,
    cache: std::sync::Arc<ResponseCache>,
}

impl<B: ModelBackend> CachedBackend<B> {
    pub fn new(inner: B, cache: std::sync::Arc<ResponseCache>) -> Self {
        Self { inner, cache }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: ModelBackend> ModelBackend for CachedBackend<B> {
    fn identity(&self) -> String {
        self.inner.identity()
    }

    fn yes_no(&self, request: &Request) -> Result<YesNoLogits> {
        let key = ResponseCache::key(&self.inner.identity(), "yes_no", request)?;
        if let Some(CachedValue::Logits { yes_bits, no_bits }) = self.cache.get(&key) {
            return Ok(YesNoLogits {
                logit_yes: f64::from_bits(yes_bits),
                logit_no: f64::from_bits(no_bits),
            });
        }
        let logits = self.inner.yes_no(request)?;
        self.cache.put(
            &key,
            CachedValue::Logits {
                yes_bits: logits.logit_yes.to_bits(),
                no_bits: logits.logit_no.to_bits(),
            },
        )?;
        Ok(logits)
    }

    fn generate(&self, request: &Request) -> Result<String> {
        let key = ResponseCache::key(&self.inner.identity(), "generate", request)?;
        if let Some(CachedValue::Text { text }) = self.cache.get(&key) {
            return Ok(text);
        }
        let text = self.inner.generate(request)?;
        // Empty generations are errors downstream; don't pin them.
        if !text.trim().is_empty() {
            self.cache.put(&key, CachedValue::Text { text: text.clone() })?;
        }
        Ok(text)
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::backends::mock::{MockBackend, MockEntry, MockTable};
    use crate::backends::{llm_generate, vlm_relevance, Role};
    use crate::image::ImageRef;

    fn image(dir: &Path) -> ImageRef {
        std::fs::write(dir.join("a.png"), b"abc").unwrap();
        ImageRef::resolve("a.png", Some(dir)).unwrap()
    }

    #[test]
    fn second_call_served_from_cache() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(ResponseCache::open(dir.path().join("c")).unwrap());
        let table = MockTable::strict().with_entry(MockEntry::visual("a.png", "a bird", 0.9));
        let vlm = CachedBackend::new(MockBackend::new(table, Role::Vlm).unwrap(), cache.clone());
        let img = image(dir.path());
        let cold = vlm_relevance(&vlm, &img, "a bird").unwrap();
        let warm = vlm_relevance(&vlm, &img, "a bird").unwrap();
        assert_eq!(cold.value.to_bits(), warm.value.to_bits());
        assert_eq!(vlm.inner().calls(), 1);
        let s = cache.stats();
        assert_eq!((s.entries, s.hits, s.misses), (1, 1, 1));
    }

    #[test]
    fn cache_survives_reopen_and_clear() {
        let dir = tempfile::tempdir().unwrap();
        let cdir = dir.path().join("c");
        let table = MockTable::strict().with_entry(MockEntry::prompt(Role::Llm, "p", "out"));
        {
            let cache = Arc::new(ResponseCache::open(&cdir).unwrap());
            let llm = CachedBackend::new(MockBackend::new(table.clone(), Role::Llm).unwrap(), cache.clone());
            assert_eq!(llm_generate(&llm, "p").unwrap(), "out");
            cache.persist_stats().unwrap();
        }
        let cache = Arc::new(ResponseCache::open(&cdir).unwrap());
        let llm = CachedBackend::new(MockBackend::new(table, Role::Llm).unwrap(), cache);
        assert_eq!(llm_generate(&llm, "p").unwrap(), "out");
        assert_eq!(llm.inner().calls(), 0);
        assert_eq!(ResponseCache::inspect(&cdir).entries, 1);
        ResponseCache::clear(&cdir).unwrap();
        assert_eq!(ResponseCache::inspect(&cdir), CacheStats::default());
    }

    #[test]
    fn image_bytes_change_the_key() {
        let dir = tempfile::tempdir().unwrap();
        let img = image(dir.path());
        let req = |i: &ImageRef| {
            Request::new(
                crate::backends::Query::Visual {
                    image: i.clone(),
                    statement: "x".into(),
                },
                crate::prompts::visual_prompt(i, "x"),
            )
        };
        let k1 = ResponseCache::key("id", "yes_no", &req(&img)).unwrap();
        std::fs::write(dir.path().join("a.png"), b"other").unwrap();
        let img2 = ImageRef::resolve("a.png", Some(dir.path())).unwrap();
        let k2 = ResponseCache::key("id", "yes_no", &req(&img2)).unwrap();
        assert_ne!(k1, k2);
        assert_eq!(k1, ResponseCache::key("id", "yes_no", &req(&img)).unwrap());
    }

    #[test]
    fn concurrent_writers_and_readers() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(ResponseCache::open(dir.path()).unwrap());
        std::thread::scope(|s| {
            for t in 0..8 {
                let cache = cache.clone();
                s.spawn(move || {
                    for i in 0..20 {
                        let key = hex::encode(Sha256::digest(format!("{}", i % 10)));
                        cache
                            .put(&key, CachedValue::Text { text: format!("{}", i % 10) })
                            .unwrap();
                        let got = cache.get(&key).unwrap();
                        assert_eq!(got, CachedValue::Text { text: format!("{}", i % 10) });
                        let _ = t;
                    }
                });
            }
        });
        assert_eq!(cache.entry_count(), 10);
    }
}
