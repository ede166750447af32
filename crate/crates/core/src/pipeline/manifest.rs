use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{sha256_hex, Config, EvalSummary};

/// SHA-256 of every file under `root` keyed by `/`-separated relative path,
/// skipping the names in `exclude`.
pub fn hash_tree(root: &Path, exclude: &[&str]) -> std::io::Result<BTreeMap<String, String>> {
    fn walk(root: &Path, dir: &Path, exclude: &[&str], out: &mut BTreeMap<String, String>) -> std::io::Result<()> {
        let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<_, _>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let path = e.path();
            let rel: Vec<String> = path
                .strip_prefix(root)
                .expect("walk stays under root")
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect();
            let rel = rel.join("/");
            if exclude.contains(&rel.as_str()) {
                continue;
            }
            if e.file_type()?.is_dir() {
                walk(root, &path, exclude, out)?;
            } else {
                out.insert(rel, sha256_hex(&std::fs::read(&path)?));
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(root, root, exclude, &mut out)?;
    Ok(out)
}

/// Record of one reproduction run. `hash` covers everything except the
/// timestamps, so two runs from the same seed and config agree on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub config_hash: String,
    pub config: Config,
    pub artifacts: BTreeMap<String, String>,
    pub checkpoints: BTreeMap<String, String>,
    pub summary: EvalSummary,
    pub started_at: u64,
    pub finished_at: u64,
    pub hash: String,
}

#[derive(Serialize)]
struct Hashed<'a> {
    seed: u64,
    config_hash: &'a str,
    config: &'a Config,
    artifacts: &'a BTreeMap<String, String>,
    checkpoints: &'a BTreeMap<String, String>,
    summary: &'a EvalSummary,
}

impl RunManifest {
    pub fn compute_hash(&self) -> String {
        let h = Hashed {
            seed: self.seed,
            config_hash: &self.config_hash,
            config: &self.config,
            artifacts: &self.artifacts,
            checkpoints: &self.checkpoints,
            summary: &self.summary,
        };
        sha256_hex(serde_json::to_string(&h).expect("manifest serializes").as_bytes())
    }

    /// Every referenced artifact exists under `root` with its recorded hash,
    /// and the manifest hash itself is consistent.
    pub fn verify(&self, root: &Path) -> Result<(), String> {
        if self.compute_hash() != self.hash {
            return Err("manifest hash does not match its contents".into());
        }
        for (rel, want) in &self.artifacts {
            let bytes = std::fs::read(root.join(rel)).map_err(|e| format!("{rel}: {e}"))?;
            if &sha256_hex(&bytes) != want {
                return Err(format!("{rel}: hash mismatch"));
            }
        }
        for rel in self.checkpoints.values() {
            if !self.artifacts.contains_key(rel) {
                return Err(format!("checkpoint {rel} is not a recorded artifact"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    // the manifest hash is recomputed from a re-read manifest.json, so every
    // float in it must survive a JSON round trip bit for bit
    #[test]
    fn floats_round_trip_exactly() {
        let mut r = crate::rng::stream(1, "floats", &[]);
        for _ in 0..20_000 {
            let x: f64 = r.gen::<f64>() * 10f64.powi(r.gen_range(-8..8));
            let back: f64 = serde_json::from_str(&serde_json::to_string(&x).unwrap()).unwrap();
            assert_eq!(back.to_bits(), x.to_bits(), "{x}");
        }
    }
}
