//! Prediction cache keyed by prefix identity.
//!
//! A key digests the ordered prefix ids, the query id, the template digest
//! and the backend digest, so equal keys mean byte-identical prompts sent to
//! the same backend. A template or backend change therefore never hits old
//! entries. On disk the cache is an append-only JSONL file of
//! `{"key", "predicted", "scores"}` objects; a truncated final line left by
//! an interrupted run is ignored on load.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::seeding::PartsHasher;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PrefixKey {
    pub prefix_digest: String,
    pub query_id: String,
    pub template_digest: String,
    pub backend_digest: String,
}

impl PrefixKey {
    pub fn new(prefix_ids: &[String], query_id: &str, template_digest: &str, backend_digest: &str) -> Self {
        Self {
            prefix_digest: PartsHasher::new()
                .parts(prefix_ids.iter().map(String::as_str))
                .finish_hex(),
            query_id: query_id.to_string(),
            template_digest: template_digest.to_string(),
            backend_digest: backend_digest.to_string(),
        }
    }

    pub fn digest(&self) -> String {
        PartsHasher::new()
            .part(&self.prefix_digest)
            .part(&self.query_id)
            .part(&self.template_digest)
            .part(&self.backend_digest)
            .finish_hex()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedPrediction {
    pub predicted: usize,
    pub scores: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    predicted: usize,
    scores: Vec<f64>,
}

/// Concurrent lookups, exclusive inserts. Concurrent computation of the same
/// key is tolerated: values are equal by determinism, the last write wins.
#[derive(Debug, Default)]
pub struct PredictionCache {
    entries: RwLock<HashMap<String, CachedPrediction>>,
    file: Option<Mutex<BufWriter<File>>>,
    path: Option<PathBuf>,
}

impl PredictionCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Open (or create) a persistent cache, loading existing entries.
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for line in reader.lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheLine>(&line) {
                    Ok(l) => {
                        entries.insert(
                            l.key,
                            CachedPrediction {
                                predicted: l.predicted,
                                scores: l.scores,
                            },
                        );
                    }
                    // Partial write from an interrupted run.
                    Err(_) => continue,
                }
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if std::fs::read(path)?.last().is_some_and(|&b| b != b'\n') {
            file.write_all(b"\n")?;
        }
        Ok(Self {
            entries: RwLock::new(entries),
            file: Some(Mutex::new(BufWriter::new(file))),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, key: &str) -> Option<CachedPrediction> {
        self.entries.read().expect("cache lock").get(key).cloned()
    }

    pub fn insert(&self, key: String, value: CachedPrediction) -> std::io::Result<()> {
        if let Some(file) = &self.file {
            let mut line = serde_json::to_string(&CacheLine {
                key: key.clone(),
                predicted: value.predicted,
                scores: value.scores.clone(),
            })?;
            line.push('\n');
            file.lock().expect("cache file lock").write_all(line.as_bytes())?;
        }
        self.entries.write().expect("cache lock").insert(key, value);
        Ok(())
    }

    pub fn flush(&self) -> std::io::Result<()> {
        match &self.file {
            Some(file) => file.lock().expect("cache file lock").flush(),
            None => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Drop for PredictionCache {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}
