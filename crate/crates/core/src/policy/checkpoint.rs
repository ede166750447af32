//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "QPONECKP"
//! version      u16 len + UTF-8 semver
//! config hash  32 bytes (SHA-256 of architecture + vocabulary JSON)
//! header       u32 len + JSON {"cfg": .., "vocab": [..]}
//! count        u64 number of parameters
//! params       count x f32, in `Weights` flat order
//! checksum     32 bytes SHA-256 of everything above
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Policy, PolicyConfig, PolicyError, Vocab, Weights};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"QPONECKP";
pub const CHECKPOINT_VERSION: &str = "1.0.0";

#[derive(Serialize, Deserialize)]
struct Header {
    cfg: PolicyConfig,
    vocab: Vocab,
}

fn bad(msg: impl Into<String>) -> PolicyError {
    PolicyError::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PolicyError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated file"))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, PolicyError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, PolicyError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, PolicyError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Policy {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(16 + self.w.n_params() * 4);
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.extend_from_slice(&(CHECKPOINT_VERSION.len() as u16).to_le_bytes());
        b.extend_from_slice(CHECKPOINT_VERSION.as_bytes());
        b.extend_from_slice(&hex::decode(self.config_hash()).expect("hex digest"));
        let header =
            serde_json::to_vec(&Header { cfg: self.cfg.clone(), vocab: self.vocab.clone() }).expect("serializable");
        b.extend_from_slice(&(header.len() as u32).to_le_bytes());
        b.extend_from_slice(&header);
        b.extend_from_slice(&(self.w.n_params() as u64).to_le_bytes());
        for s in self.w.slices() {
            for x in s {
                b.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
        let sum = Sha256::digest(&b);
        b.extend_from_slice(&sum);
        b
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, PolicyError> {
        if buf.len() < 32 {
            return Err(bad("truncated file"));
        }
        let (body, sum) = buf.split_at(buf.len() - 32);
        let mut r = Reader { buf: body, at: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic bytes"));
        }
        let vlen = r.u16()? as usize;
        let version = std::str::from_utf8(r.take(vlen)?).map_err(|_| bad("version is not UTF-8"))?;
        if version.split('.').next() != CHECKPOINT_VERSION.split('.').next() {
            return Err(bad(format!("unsupported format version {version}")));
        }
        if Sha256::digest(body).as_slice() != sum {
            return Err(bad("checksum mismatch"));
        }
        let stored_hash = hex::encode(r.take(32)?);
        let hlen = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?).map_err(|e| bad(format!("header: {e}")))?;
        header.cfg.check().map_err(PolicyError::Config)?;
        let mut w = Weights::zeros(&header.cfg, header.vocab.len());
        let count = r.u64()? as usize;
        if count != w.n_params() {
            return Err(bad(format!("header implies {} parameters, file has {count}", w.n_params())));
        }
        let raw = r.take(count.checked_mul(4).ok_or_else(|| bad("parameter count overflow"))?)?;
        let flat: Vec<f64> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        w.load_flat(&flat)?;
        if r.at != body.len() {
            return Err(bad("trailing bytes"));
        }
        let p = Policy { cfg: header.cfg, vocab: header.vocab, w };
        if p.config_hash() != stored_hash {
            return Err(PolicyError::ConfigMismatch { expected: stored_hash, found: p.config_hash() });
        }
        Ok(p)
    }

    /// Atomic write (temp file + rename).
    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&self.to_bytes())?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| PolicyError::Io(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Loads and rejects checkpoints whose architecture/vocabulary hash
    /// differs from `expected`.
    pub fn load_expecting(path: &Path, expected: &str) -> Result<Self, PolicyError> {
        let p = Self::load(path)?;
        if p.config_hash() != expected {
            return Err(PolicyError::ConfigMismatch { expected: expected.into(), found: p.config_hash() });
        }
        Ok(p)
    }
}
