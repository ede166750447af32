//! Nearline serving: a versioned query -> output snapshot built offline,
//! looked up online, with the legacy pipeline answering misses.

mod http;
mod snapshot;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::legacy::LegacyPipeline;
use crate::policy::Policy;
use crate::schema::{full_coverage, parse_output, serialize_covered, serialize_output, AnnotatedExample, BusinessRules, QPOutput};
use crate::training::TaskEnv;

pub use http::{router, serve};
pub use snapshot::{parse_snapshot, read_snapshot, write_snapshot, SignalSnapshot, SnapshotFormatError, SNAPSHOT_MAGIC};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServingConfig {
    /// Case-fold keys in addition to NFC + trim.
    pub lowercase: bool,
    /// Answer misses with the legacy pipeline.
    pub fallback: bool,
    /// Largest acceptable fraction of precomputed entries that needed the
    /// legacy fallback.
    pub fallback_ceiling: f64,
}

impl Default for ServingConfig {
    fn default() -> Self {
        Self { lowercase: true, fallback: true, fallback_ceiling: 0.05 }
    }
}

impl ServingConfig {
    pub fn check(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.fallback_ceiling) {
            return Err(format!("fallback_ceiling {} outside [0,1]", self.fallback_ceiling));
        }
        Ok(())
    }
}

/// Cache key: NFC, control whitespace folded to spaces, trimmed, optionally
/// lowercased.
pub fn canonicalize(query: &str, lowercase: bool) -> String {
    let s: String = query.nfc().map(|c| if c.is_control() { ' ' } else { c }).collect();
    let s = s.trim();
    if lowercase {
        s.to_lowercase()
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Cache,
    Fallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LookupResult {
    pub query: String,
    pub payload: Arc<str>,
    pub source: Source,
    /// None only for fallback answers given before any snapshot was loaded.
    pub snapshot_version: Option<u64>,
}

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("no snapshot loaded and fallback disabled")]
    Unavailable,
    #[error("query not in snapshot and fallback disabled")]
    NotFound,
    #[error("snapshot version {new} is not newer than active version {active}")]
    StaleVersion { new: u64, active: u64 },
    #[error(transparent)]
    Format(#[from] SnapshotFormatError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Health {
    pub version: Option<u64>,
    pub entries: usize,
    pub fallback: bool,
    pub misses: u64,
}

/// Active snapshot behind a read-mostly lock. Readers clone the `Arc` and
/// drop the lock at once, so a swap never waits on a slow reader and a
/// reader keeps the version it started with.
pub struct SnapshotStore {
    active: RwLock<Option<Arc<SignalSnapshot>>>,
    fallback: Option<LegacyPipeline>,
    lowercase: bool,
    miss_log: Option<Mutex<File>>,
    misses: AtomicU64,
}

impl SnapshotStore {
    pub fn new(fallback: Option<LegacyPipeline>, lowercase: bool, miss_log: Option<&Path>) -> Result<Self, ServeError> {
        let miss_log = match miss_log {
            Some(p) => Some(Mutex::new(OpenOptions::new().create(true).append(true).open(p)?)),
            None => None,
        };
        Ok(Self { active: RwLock::new(None), fallback, lowercase, miss_log, misses: AtomicU64::new(0) })
    }

    pub fn current(&self) -> Option<Arc<SignalSnapshot>> {
        self.active.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Publishes `snap` if its version is newer than the active one.
    pub fn install(&self, snap: SignalSnapshot) -> Result<Option<u64>, ServeError> {
        let mut slot = self.active.write().unwrap_or_else(|e| e.into_inner());
        let previous = slot.as_ref().map(|s| s.version);
        if let Some(active) = previous {
            if snap.version <= active {
                return Err(ServeError::StaleVersion { new: snap.version, active });
            }
        }
        *slot = Some(Arc::new(snap));
        Ok(previous)
    }

    /// Loads and validates a snapshot file fully before swapping it in; on
    /// any error the active snapshot is untouched.
    pub fn refresh(&self, path: &Path, schema: &crate::schema::Schema) -> Result<Option<u64>, ServeError> {
        let snap = read_snapshot(path, schema, self.lowercase)?;
        self.install(snap)
    }

    pub fn lookup(&self, query: &str) -> Result<LookupResult, ServeError> {
        let key = canonicalize(query, self.lowercase);
        let snap = self.current();
        if let Some(s) = &snap {
            if let Some(p) = s.entries.get(&key) {
                return Ok(LookupResult { query: key, payload: p.clone(), source: Source::Cache, snapshot_version: Some(s.version) });
            }
        }
        let Some(legacy) = &self.fallback else {
            return Err(if snap.is_none() { ServeError::Unavailable } else { ServeError::NotFound });
        };
        let payload: Arc<str> = legacy_payload(legacy, &key).into();
        self.log_miss(&key);
        Ok(LookupResult { query: key, payload, source: Source::Fallback, snapshot_version: snap.map(|s| s.version) })
    }

    fn log_miss(&self, key: &str) {
        self.misses.fetch_add(1, Ordering::SeqCst);
        if let Some(f) = &self.miss_log {
            let mut f = f.lock().unwrap_or_else(|e| e.into_inner());
            if let Err(e) = f.write_all(format!("{key}\n").as_bytes()).and_then(|_| f.flush()) {
                log::warn!("miss-log append failed: {e}");
            }
        }
    }

    pub fn health(&self) -> Health {
        let snap = self.current();
        Health {
            version: snap.as_ref().map(|s| s.version),
            entries: snap.map_or(0, |s| s.entries.len()),
            fallback: self.fallback.is_some(),
            misses: self.misses.load(Ordering::SeqCst),
        }
    }
}

fn legacy_payload(legacy: &LegacyPipeline, query: &str) -> String {
    let out = legacy.run(query);
    serialize_output(&out).unwrap_or_else(|_| serialize_covered(&out, &full_coverage()))
}

/// Distinct canonical queries of a miss-log, in sorted order.
pub fn read_miss_log(path: &Path, lowercase: bool) -> std::io::Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    let set: BTreeSet<String> = text.lines().map(|l| canonicalize(l, lowercase)).filter(|q| !q.is_empty()).collect();
    Ok(set.into_iter().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecomputeReport {
    pub version: u64,
    pub entries: usize,
    /// Queries whose decode did not parse and were filled by the legacy pipeline.
    pub fallback: Vec<String>,
    pub fallback_fraction: f64,
}

/// What the policy sees at serving time: the configured instruction and
/// rules with no session context.
pub fn serving_example(query: &str, instruction: &str, rules: &BusinessRules) -> AnnotatedExample {
    AnnotatedExample {
        id: 0,
        instruction: instruction.to_string(),
        rules: rules.clone(),
        hist: vec![],
        notes: vec![],
        query: query.to_string(),
        gold: QPOutput::default(),
        coverage: full_coverage(),
    }
}

/// Greedy-decodes every distinct canonical query. Entries that fail strict
/// parsing (or whose prompt does not fit) take the legacy result instead.
pub fn precompute(
    queries: &[String],
    policy: &Policy,
    env: &TaskEnv,
    legacy: &LegacyPipeline,
    instruction: &str,
    rules: &BusinessRules,
    version: u64,
    lowercase: bool,
) -> (SignalSnapshot, PrecomputeReport) {
    let keys: BTreeSet<String> = queries.iter().map(|q| canonicalize(q, lowercase)).filter(|q| !q.is_empty()).collect();
    let keys: Vec<String> = keys.into_iter().collect();
    let decoded: Vec<(String, Option<String>)> = keys
        .par_iter()
        .map(|q| {
            let ex = serving_example(q, instruction, rules);
            let text = env
                .prompt_ids(&ex, &policy.vocab)
                .ok()
                .and_then(|p| policy.greedy(&p, env.max_gen_len).ok())
                .and_then(|r| parse_output(&r.text, q, &env.schema).ok())
                .and_then(|o| serialize_output(&o).ok());
            (q.clone(), text)
        })
        .collect();
    let mut entries = BTreeMap::new();
    let mut fallback = Vec::new();
    for (q, text) in decoded {
        let payload = match text {
            Some(t) => t,
            None => {
                fallback.push(q.clone());
                legacy_payload(legacy, &q)
            }
        };
        entries.insert(q, Arc::<str>::from(payload));
    }
    let n = entries.len();
    let report = PrecomputeReport {
        version,
        entries: n,
        fallback_fraction: if n == 0 { 0.0 } else { fallback.len() as f64 / n as f64 },
        fallback,
    };
    (SignalSnapshot { version, created_at: now_secs(), entries }, report)
}

pub(crate) fn now_secs() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[cfg(test)]
mod tests;
