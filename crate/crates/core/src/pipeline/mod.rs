//! End-to-end orchestration: corpus, pseudo-labels, the three training
//! stages, evaluation, snapshot precompute and the run manifest.

mod config;
mod io;
mod manifest;
mod stages;

use std::collections::BTreeSet;

use sha2::{Digest, Sha256};

use crate::legacy::CorpusProfile;
use crate::policy::Vocab;
use crate::prompt::escape;
use crate::schema::{AnnotatedExample, Ontology, Schema, Taxonomy, KEYS};

pub use config::{Config, ConfigError, EvalSettings, LegacySettings};
pub use io::{read_json, read_jsonl, write_atomic, write_json, write_jsonl, Layout};
pub use manifest::{hash_tree, RunManifest};
pub use stages::*;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Entity types and categories the profile can produce, plus the legacy
/// fallback category.
pub fn schema_for(profile: &CorpusProfile, fallback_category: &str) -> Schema {
    let types: BTreeSet<String> = profile.entities.iter().map(|e| e.etype.clone()).collect();
    let mut cats = profile.categories();
    if !cats.iter().any(|c| c == fallback_category) {
        cats.push(fallback_category.to_string());
    }
    Schema { ontology: Ontology::from_labels(types), taxonomy: Taxonomy::from_labels(cats) }
}

/// Multi-character tokens: prompt delimiters, the fixed instruction and rule
/// lines, JSON key openers and quoted labels. Everything else is characters.
pub fn vocab_specials(cfg: &Config, schema: &Schema) -> Vec<String> {
    let d = &cfg.prompt.delimiters;
    let mut out: Vec<String> = d.all().iter().map(|s| s.to_string()).collect();
    out.push(escape(&cfg.instruction));
    for r in &cfg.rules.0 {
        out.push(format!("{}\t{}\n", escape(&r.name), escape(&r.text)));
    }
    for k in KEYS {
        out.push(format!("{{\"{k}\":"));
        out.push(format!(",\"{k}\":"));
    }
    for t in schema.ontology.labels() {
        out.push(format!("\",\"{t}\","));
    }
    for c in schema.taxonomy.labels() {
        out.push(format!("[\"{c}\""));
        out.push(format!(",\"{c}\""));
    }
    let mut intents: BTreeSet<&str> = cfg.profile.suffixes.iter().map(|s| s.intent.as_str()).collect();
    intents.insert(&cfg.profile.default_intent);
    for i in intents {
        out.push(format!("\"{i}\""));
    }
    out.extend(["[[\"", "]]", "],[\"", "\",\"", "[\"", "\"]"].map(String::from));
    out
}

/// Vocabulary over every character that can appear in prompts or targets.
pub fn build_vocab(cfg: &Config, schema: &Schema, texts: &[&AnnotatedExample]) -> Vocab {
    let specials = vocab_specials(cfg, schema);
    let mut chars: Vec<String> = vec!["0123456789{}[],:\"\\ntl<>/".to_string(), cfg.legacy.fallback_category.clone()];
    for ex in texts {
        chars.push(ex.query.clone());
        chars.extend(ex.hist.iter().cloned());
        chars.extend(ex.notes.iter().cloned());
    }
    let profile = &cfg.profile;
    chars.extend(profile.entities.iter().map(|e| e.surface.clone()));
    chars.extend(profile.nouns.iter().map(|n| n.surface.clone()));
    chars.extend(profile.modifiers.iter().cloned());
    chars.extend(profile.suffixes.iter().map(|s| s.surface.clone()));
    chars.push(profile.stopword.clone());
    chars.extend(specials.iter().cloned());
    Vocab::build(&specials, chars.iter().map(String::as_str))
}
