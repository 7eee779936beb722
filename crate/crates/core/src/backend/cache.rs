use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::BackendError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub request_digest: String,
    pub text: String,
    /// Seconds since the Unix epoch at write time.
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub entries: u64,
    pub bytes: u64,
}

/// Directory of write-once response files, one `<key>.json` per request.
#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    tmp_counter: AtomicU64,
}

impl ResponseCache {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, BackendError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        Ok(ResponseCache {
            dir,
            tmp_counter: AtomicU64::new(0),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Result<Option<CacheEntry>, BackendError> {
        match fs::read(self.path_for(key)) {
            Ok(bytes) => {
                let entry: CacheEntry = serde_json::from_slice(&bytes).map_err(|e| {
                    BackendError::CacheIo(std::io::Error::new(std::io::ErrorKind::InvalidData, e))
                })?;
                Ok(Some(entry))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Writes an entry. Rewriting a key with identical text is a no-op;
    /// different text is an integrity error.
    pub fn put(&self, key: &str, text: &str) -> Result<(), BackendError> {
        if let Some(existing) = self.get(key)? {
            return if existing.text == text {
                Ok(())
            } else {
                Err(BackendError::CacheIntegrity {
                    key: key.to_owned(),
                })
            };
        }
        let entry = CacheEntry {
            request_digest: key.to_owned(),
            text: text.to_owned(),
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let n = self.tmp_counter.fetch_add(1, Ordering::Relaxed);
        let tmp = self
            .dir
            .join(format!(".{key}.{}.{n}.tmp", std::process::id()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&serde_json::to_vec(&entry).expect("entry serializes"))?;
            f.sync_all()?;
        }
        fs::rename(&tmp, self.path_for(key))?;
        Ok(())
    }

    pub fn stats(&self) -> Result<CacheStats, BackendError> {
        let mut stats = CacheStats::default();
        for entry in fs::read_dir(&self.dir)? {
            let entry = entry?;
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if name.ends_with(".json") && !name.starts_with('.') {
                stats.entries += 1;
                stats.bytes += entry.metadata()?.len();
            }
        }
        Ok(stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_once_semantics() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let key = "a".repeat(64);
        assert!(cache.get(&key).unwrap().is_none());
        cache.put(&key, "hello").unwrap();
        cache.put(&key, "hello").unwrap();
        assert!(matches!(
            cache.put(&key, "other"),
            Err(BackendError::CacheIntegrity { .. })
        ));
        let entry = cache.get(&key).unwrap().unwrap();
        assert_eq!(entry.text, "hello");
        assert_eq!(entry.request_digest, key);
        assert_eq!(cache.stats().unwrap().entries, 1);
    }

    #[test]
    fn no_temp_files_left_behind() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        for i in 0..5 {
            cache.put(&format!("{i:064}"), "x").unwrap();
        }
        let names: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names.len(), 5);
        assert!(names.iter().all(|n| n.ends_with(".json")));
    }
}
