//! Content-addressed completion cache backed by an append-only JSONL file.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::GatewayError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Key over (model, prompt id, prompt body digest, pmid). Fields are length
/// prefixed so no two tuples serialize alike.
pub fn cache_key(model_id: &str, prompt_id: &str, body_digest: &str, pmid: &str) -> String {
    let mut h = Sha256::new();
    for part in [model_id, prompt_id, body_digest, pmid] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionCacheEntry {
    pub key: String,
    pub model_id: String,
    pub prompt_id: String,
    pub pmid: String,
    pub raw: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub cost: f64,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug)]
pub struct CompletionCache {
    entries: RwLock<HashMap<String, CompletionCacheEntry>>,
    writer: Mutex<Option<File>>,
    path: Option<PathBuf>,
}

impl CompletionCache {
    pub fn in_memory() -> Self {
        Self {
            entries: RwLock::new(HashMap::new()),
            writer: Mutex::new(None),
            path: None,
        }
    }

    /// Replays an existing file (or starts a new one). A torn final line,
    /// as left by a crash mid-append, is truncated away; damage elsewhere is
    /// an error.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref().to_path_buf();
        let mut entries = HashMap::new();
        let mut good_len = 0u64;
        let mut torn = false;
        if path.exists() {
            let text = std::fs::read_to_string(&path)?;
            let lines: Vec<&str> = text.split_inclusive('\n').collect();
            for (i, line) in lines.iter().enumerate() {
                if !line.trim().is_empty() {
                    match serde_json::from_str::<CompletionCacheEntry>(line) {
                        Ok(e) => {
                            entries.entry(e.key.clone()).or_insert(e);
                        }
                        Err(err) if i + 1 == lines.len() => {
                            log::warn!("{}: dropping torn final line: {err}", path.display());
                            torn = true;
                            break;
                        }
                        Err(err) => {
                            return Err(GatewayError::CacheFormat {
                                line: i + 1,
                                message: err.to_string(),
                            })
                        }
                    }
                }
                good_len += line.len() as u64;
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        if torn {
            file.set_len(good_len)?;
        }
        if good_len > 0 && !std::fs::read(&path)?.ends_with(b"\n") {
            // A complete final record missing only its newline.
            (&file).write_all(b"\n")?;
        }
        Ok(Self {
            entries: RwLock::new(entries),
            writer: Mutex::new(Some(file)),
            path: Some(path),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, key: &str) -> Option<CompletionCacheEntry> {
        self.entries.read().get(key).cloned()
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.read().contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.entries.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Entries are immutable: inserting an existing key returns the stored
    /// entry and writes nothing.
    pub fn insert(&self, entry: CompletionCacheEntry) -> Result<CompletionCacheEntry, GatewayError> {
        let mut writer = self.writer.lock();
        if let Some(existing) = self.entries.read().get(&entry.key) {
            return Ok(existing.clone());
        }
        if let Some(file) = writer.as_mut() {
            let mut line = serde_json::to_string(&entry)?;
            line.push('\n');
            file.write_all(line.as_bytes())?;
            file.flush()?;
        }
        self.entries.write().insert(entry.key.clone(), entry.clone());
        Ok(entry)
    }

    pub fn total_cost(&self) -> f64 {
        let entries = self.entries.read();
        let mut costs: Vec<f64> = entries.values().map(|e| e.cost).collect();
        // Summation order fixed so the total does not depend on hash order.
        costs.sort_by(f64::total_cmp);
        costs.iter().sum()
    }

    /// All entries sorted by key.
    pub fn snapshot(&self) -> Vec<CompletionCacheEntry> {
        let mut v: Vec<_> = self.entries.read().values().cloned().collect();
        v.sort_by(|a, b| a.key.cmp(&b.key));
        v
    }
}
