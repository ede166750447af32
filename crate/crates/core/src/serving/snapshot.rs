use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use super::{canonicalize, now_secs};
use crate::schema::{parse_output, serialize_output, Schema};

pub const SNAPSHOT_MAGIC: &str = "QPSNAPv1";

/// One published cache version. `entries` maps canonical query to canonical
/// output JSON.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSnapshot {
    pub version: u64,
    /// Unix seconds; taken from the file's mtime on load, never hashed.
    pub created_at: u64,
    pub entries: BTreeMap<String, Arc<str>>,
}

impl SignalSnapshot {
    /// File body: header line then `query\tjson` lines in key order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{SNAPSHOT_MAGIC} {} {}\n", self.version, self.entries.len()).into_bytes();
        for (q, j) in &self.entries {
            out.extend_from_slice(q.as_bytes());
            out.push(b'\t');
            out.extend_from_slice(j.as_bytes());
            out.push(b'\n');
        }
        out
    }

    /// Everything after the header line, so bodies of two versions compare.
    pub fn body_bytes(&self) -> Vec<u8> {
        let b = self.to_bytes();
        let cut = b.iter().position(|&c| c == b'\n').map_or(b.len(), |i| i + 1);
        b[cut..].to_vec()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SnapshotFormatError {
    #[error("bad header: {0}")]
    Header(String),
    #[error("line {line}: {msg}")]
    Entry { line: usize, msg: String },
    #[error("header promises {promised} entries, found {found}")]
    Count { promised: usize, found: usize },
}

/// Parses and fully validates a snapshot body: canonical keys, strictly
/// increasing order, and payloads that strictly parse against their query
/// and are already canonical.
pub fn parse_snapshot(bytes: &[u8], schema: &Schema, lowercase: bool) -> Result<SignalSnapshot, SnapshotFormatError> {
    let text = std::str::from_utf8(bytes).map_err(|e| SnapshotFormatError::Header(format!("not UTF-8: {e}")))?;
    let (header, rest) = text.split_once('\n').ok_or_else(|| SnapshotFormatError::Header("missing newline".into()))?;
    let fields: Vec<&str> = header.split(' ').collect();
    let (version, count) = match fields.as_slice() {
        [m, v, c] if *m == SNAPSHOT_MAGIC => (
            v.parse::<u64>().map_err(|_| SnapshotFormatError::Header(format!("bad version `{v}`")))?,
            c.parse::<usize>().map_err(|_| SnapshotFormatError::Header(format!("bad count `{c}`")))?,
        ),
        _ => return Err(SnapshotFormatError::Header(format!("expected `{SNAPSHOT_MAGIC} <version> <count>`"))),
    };
    if !rest.is_empty() && !rest.ends_with('\n') {
        return Err(SnapshotFormatError::Entry { line: rest.lines().count() + 1, msg: "truncated line".into() });
    }
    let mut entries = BTreeMap::new();
    let mut prev: Option<&str> = None;
    for (i, line) in rest.lines().enumerate() {
        let line_no = i + 2;
        let err = |msg: String| SnapshotFormatError::Entry { line: line_no, msg };
        let (q, j) = line.split_once('\t').ok_or_else(|| err("missing tab".into()))?;
        if q.is_empty() || canonicalize(q, lowercase) != q {
            return Err(err(format!("key `{q}` is not canonical")));
        }
        if prev.is_some_and(|p| p >= q) {
            return Err(err("keys not strictly increasing".into()));
        }
        prev = Some(q);
        let out = parse_output(j, q, schema).map_err(|e| err(e.to_string()))?;
        if serialize_output(&out).ok().as_deref() != Some(j) {
            return Err(err("payload is not canonical".into()));
        }
        entries.insert(q.to_string(), Arc::<str>::from(j));
    }
    if entries.len() != count {
        return Err(SnapshotFormatError::Count { promised: count, found: entries.len() });
    }
    Ok(SignalSnapshot { version, created_at: 0, entries })
}

pub fn read_snapshot(path: &Path, schema: &Schema, lowercase: bool) -> Result<SignalSnapshot, super::ServeError> {
    let bytes = std::fs::read(path)?;
    let mut snap = parse_snapshot(&bytes, schema, lowercase)?;
    snap.created_at = std::fs::metadata(path)?
        .modified()
        .ok()
        .and_then(|t| t.duration_since(std::time::UNIX_EPOCH).ok())
        .map_or_else(now_secs, |d| d.as_secs());
    Ok(snap)
}

/// Writes through a temp file in the target directory and renames, so a
/// reader sees either the old file or the complete new one.
pub fn write_snapshot(path: &Path, snap: &SignalSnapshot) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&snap.to_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
