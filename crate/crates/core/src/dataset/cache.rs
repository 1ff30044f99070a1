//! Description cache: one JSON object per line, keyed by sample id.
//!
//! Later lines for the same id replace earlier ones, so updates are appends.
//! Provenance (model name, prompt, decoding parameters) travels with every
//! entry so that a cache produced under a different prompt or model can be
//! detected.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptions::{DescriptionError, DescriptionSet};

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("description cache storage failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("description cache line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("wrong description count for `{id}`: expected {expected}, got {actual}")]
    WrongDescriptionCount {
        id: String,
        expected: usize,
        actual: usize,
    },
    #[error(transparent)]
    Invalid(#[from] DescriptionError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_name: String,
    pub prompt: String,
    /// Seconds since the Unix epoch when the response was obtained.
    pub timestamp: u64,
    /// Decoding parameters echoed by the service (temperature, max tokens, ...).
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub decoding: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub descriptions: DescriptionSet,
    pub provenance: Provenance,
}

impl CacheEntry {
    // Timestamps are excluded so re-putting the same response is a no-op.
    fn same_content(&self, other: &CacheEntry) -> bool {
        self.descriptions == other.descriptions
            && self.provenance.model_name == other.provenance.model_name
            && self.provenance.prompt == other.provenance.prompt
            && self.provenance.decoding == other.provenance.decoding
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Line {
    id: String,
    texts: Vec<String>,
    raw_response: String,
    #[serde(default)]
    padded: bool,
    #[serde(flatten)]
    provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PutOutcome {
    Inserted,
    Replaced,
    Unchanged,
}

/// Concurrent readers, one writer at a time.
#[derive(Debug)]
pub struct DescriptionCache {
    k: usize,
    path: Option<PathBuf>,
    entries: RwLock<BTreeMap<String, CacheEntry>>,
    writer: Mutex<Option<File>>,
}

impl DescriptionCache {
    /// A cache that is never persisted.
    pub fn in_memory(k: usize) -> Self {
        Self {
            k,
            path: None,
            entries: RwLock::new(BTreeMap::new()),
            writer: Mutex::new(None),
        }
    }

    /// Opens (or creates) a cache file, loading existing entries.
    pub fn open(path: &Path, k: usize) -> Result<Self, CacheError> {
        let mut entries = BTreeMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let parsed: Line = serde_json::from_str(&line).map_err(|e| CacheError::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
                let entry = entry_from_line(parsed, k)?;
                entries.insert(entry.descriptions.sample_id.clone(), entry);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            k,
            path: Some(path.to_path_buf()),
            entries: RwLock::new(entries),
            writer: Mutex::new(Some(file)),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `None` for ids that were never cached.
    pub fn get(&self, id: &str) -> Option<CacheEntry> {
        self.entries.read().unwrap().get(id).cloned()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.read().unwrap().contains_key(id)
    }

    pub fn put(&self, entry: CacheEntry) -> Result<PutOutcome, CacheError> {
        let d = &entry.descriptions;
        if d.texts.len() != self.k {
            return Err(CacheError::WrongDescriptionCount {
                id: d.sample_id.clone(),
                expected: self.k,
                actual: d.texts.len(),
            });
        }
        d.validate(self.k)?;

        let mut writer = self.writer.lock().unwrap();
        let outcome = match self.entries.read().unwrap().get(&d.sample_id) {
            Some(existing) if existing.same_content(&entry) => return Ok(PutOutcome::Unchanged),
            Some(_) => PutOutcome::Replaced,
            None => PutOutcome::Inserted,
        };
        if let Some(file) = writer.as_mut() {
            let line = Line {
                id: d.sample_id.clone(),
                texts: d.texts.clone(),
                raw_response: d.raw_response.clone(),
                padded: d.padded,
                provenance: entry.provenance.clone(),
            };
            let mut text = serde_json::to_string(&line).expect("cache line serializes");
            text.push('\n');
            file.write_all(text.as_bytes())?;
            file.flush()?;
        }
        self.entries
            .write()
            .unwrap()
            .insert(d.sample_id.clone(), entry);
        Ok(outcome)
    }

    /// Ids whose provenance differs from the given prompt and model.
    pub fn stale_ids(&self, prompt: &str, model_name: Option<&str>) -> Vec<String> {
        self.entries
            .read()
            .unwrap()
            .values()
            .filter(|e| {
                e.provenance.prompt != prompt
                    || model_name.is_some_and(|m| m != e.provenance.model_name)
            })
            .map(|e| e.descriptions.sample_id.clone())
            .collect()
    }

    /// Distinct prompts recorded across entries, sorted.
    pub fn prompts(&self) -> Vec<String> {
        let mut p: Vec<String> = self
            .entries
            .read()
            .unwrap()
            .values()
            .map(|e| e.provenance.prompt.clone())
            .collect();
        p.sort();
        p.dedup();
        p
    }

    /// Canonical serialization of the current contents, one line per id in id order.
    pub fn to_canonical_jsonl(&self) -> String {
        let mut out = String::new();
        for e in self.entries.read().unwrap().values() {
            let line = Line {
                id: e.descriptions.sample_id.clone(),
                texts: e.descriptions.texts.clone(),
                raw_response: e.descriptions.raw_response.clone(),
                padded: e.descriptions.padded,
                provenance: e.provenance.clone(),
            };
            out.push_str(&serde_json::to_string(&line).expect("cache line serializes"));
            out.push('\n');
        }
        out
    }
}

fn entry_from_line(line: Line, k: usize) -> Result<CacheEntry, CacheError> {
    if line.texts.len() != k {
        return Err(CacheError::WrongDescriptionCount {
            id: line.id,
            expected: k,
            actual: line.texts.len(),
        });
    }
    let descriptions = DescriptionSet {
        sample_id: line.id,
        texts: line.texts,
        raw_response: line.raw_response,
        padded: line.padded,
    };
    descriptions.validate(k)?;
    Ok(CacheEntry {
        descriptions,
        provenance: line.provenance,
    })
}
