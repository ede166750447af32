use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::profile::{CorpusProfile, EntityWord};
use crate::rng;
use crate::schema::{
    full_coverage, segments_from_surfaces, AnnotatedExample, BusinessRules, EntityMention, QPOutput, TaxonomyLabels,
    TermWeightLevel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSizes {
    pub n_unified: usize,
    pub n_qlog: usize,
    pub n_golden: usize,
    /// Annotated prompts held out of SFT, from which the GRPO set is filtered.
    pub n_pool: usize,
}

impl Default for CorpusSizes {
    fn default() -> Self {
        Self { n_unified: 2000, n_qlog: 50_000, n_golden: 500, n_pool: 3000 }
    }
}

/// The disjoint splits. `qlog` keeps its hidden gold so pseudo-label noise
/// can be measured; training only ever sees its queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub unified: Vec<AnnotatedExample>,
    pub qlog: Vec<AnnotatedExample>,
    pub golden: Vec<AnnotatedExample>,
    pub pool: Vec<AnnotatedExample>,
}

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("corpus needs at least one unified example")]
    Empty,
    #[error("profile cannot produce {wanted} distinct queries (stopped at {got})")]
    Exhausted { wanted: usize, got: usize },
    #[error("invalid corpus profile: {0}")]
    Profile(String),
}

pub const GOLDEN_ID_BASE: u64 = 10_000_000;
pub const QLOG_ID_BASE: u64 = 20_000_000;
pub const POOL_ID_BASE: u64 = 30_000_000;

/// Samples one templated query `modifier? stopword? entity{0,2} noun suffix?`
/// with its full gold annotation. With a `domain`, the noun is usually drawn
/// from that category.
pub fn generate_query(r: &mut rng::Rng, profile: &CorpusProfile, domain: Option<&str>) -> (String, QPOutput) {
    let in_domain: Vec<_> = match domain {
        Some(d) if r.gen::<f64>() < profile.p_hist_domain => profile.nouns.iter().filter(|n| n.senses().any(|c| c == d)).collect(),
        _ => vec![],
    };
    let noun = match in_domain.choose(r) {
        Some(n) => *n,
        None => profile.nouns.choose(r).expect("profile has nouns"),
    };
    let noun_category = match domain.filter(|d| noun.senses().any(|c| c == d)) {
        Some(d) if !in_domain.is_empty() => d.to_string(),
        _ => noun.senses().collect::<Vec<_>>().choose(r).map(|c| c.to_string()).expect("noun has a category"),
    };
    let n_entities = pick_weighted(r, &profile.p_entities);
    let mut chosen: Vec<&EntityWord> = Vec::new();
    for _ in 0..n_entities {
        let same: Vec<&EntityWord> = profile
            .entities
            .iter()
            .filter(|e| e.category == noun_category && !chosen.iter().any(|c| c.surface == e.surface))
            .collect();
        let any: Vec<&EntityWord> =
            profile.entities.iter().filter(|e| !chosen.iter().any(|c| c.surface == e.surface)).collect();
        let pool = if !same.is_empty() && r.gen::<f64>() < profile.p_same_category { same } else { any };
        if let Some(e) = pool.choose(r) {
            chosen.push(e);
        }
    }

    let mut surfaces: Vec<String> = Vec::new();
    let mut weights = Vec::new();
    let mut entities = Vec::new();
    let mut pos = 0usize;
    let mut push = |surfaces: &mut Vec<String>, w: TermWeightLevel, s: &str, weights: &mut Vec<TermWeightLevel>| {
        surfaces.push(s.to_string());
        weights.push(w);
        let start = pos;
        pos += s.chars().count();
        (start, pos)
    };

    if !profile.modifiers.is_empty() && r.gen::<f64>() < profile.p_modifier {
        let m = profile.modifiers.choose(r).unwrap();
        push(&mut surfaces, TermWeightLevel::MID, m, &mut weights);
        if r.gen::<f64>() < profile.p_stopword {
            push(&mut surfaces, TermWeightLevel::STOP, &profile.stopword, &mut weights);
        }
    }
    for e in &chosen {
        let (a, b) = push(&mut surfaces, TermWeightLevel::CORE, &e.surface, &mut weights);
        entities.push(EntityMention::new(e.surface.clone(), e.etype.clone(), a, b));
    }
    let noun_level = if chosen.is_empty() { TermWeightLevel::CORE } else { TermWeightLevel::MID };
    push(&mut surfaces, noun_level, &noun.surface, &mut weights);
    let mut intent = profile.default_intent.clone();
    if !profile.suffixes.is_empty() && r.gen::<f64>() < profile.p_suffix {
        let s = profile.suffixes.choose(r).unwrap();
        push(&mut surfaces, TermWeightLevel::LOW, &s.surface, &mut weights);
        intent = s.intent.clone();
    }

    let mut category = vec![noun_category];
    for e in &chosen {
        if !category.contains(&e.category) {
            category.push(e.category.clone());
        }
    }

    let query = surfaces.concat();
    let out = QPOutput {
        entities,
        segments: segments_from_surfaces(&surfaces),
        weights,
        category: TaxonomyLabels(category),
        intent_desc: intent,
    };
    (query, out)
}

fn pick_weighted(r: &mut rng::Rng, p: &[f64]) -> usize {
    let total: f64 = p.iter().sum();
    let mut u = r.gen::<f64>() * total;
    for (i, w) in p.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    p.len() - 1
}

fn context(r: &mut rng::Rng, profile: &CorpusProfile, gold: &QPOutput) -> (Vec<String>, Vec<String>) {
    let n_hist = r.gen_range(0..=profile.max_hist);
    let domain = gold.category.0.first().map(String::as_str);
    let hist = (0..n_hist).map(|_| generate_query(r, profile, domain).0).collect();
    let n_notes = r.gen_range(0..=profile.max_notes);
    let heads: Vec<&str> = gold.entities.iter().map(|e| e.surface.as_str()).chain(gold.segments.last().map(|s| s.surface.as_str())).collect();
    let notes = (0..n_notes)
        .map(|_| {
            let head = heads.choose(r).copied().unwrap_or_default();
            let tail = profile.note_suffixes.choose(r).map(String::as_str).unwrap_or_default();
            format!("{head}{tail}")
        })
        .collect();
    (hist, notes)
}

/// Deterministic given `seed`: unified training set, logged queries, golden
/// test set and GRPO prompt pool, with pairwise-disjoint query strings.
pub fn generate_corpus(
    seed: u64,
    sizes: CorpusSizes,
    profile: &CorpusProfile,
    instruction: &str,
    rules: &BusinessRules,
) -> Result<Corpus, GenerateError> {
    if sizes.n_unified == 0 {
        return Err(GenerateError::Empty);
    }
    profile.check().map_err(GenerateError::Profile)?;
    let mut seen = HashSet::new();

    let mut split = |name: &str, n: usize, id_base: u64, with_context: bool| -> Result<Vec<AnnotatedExample>, GenerateError> {
        let mut r = rng::stream(seed, name, &[]);
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n {
            attempts += 1;
            if attempts > 50 * n + 1000 {
                return Err(GenerateError::Exhausted { wanted: n, got: out.len() });
            }
            let (query, gold) = generate_query(&mut r, profile, None);
            if !seen.insert(query.clone()) {
                continue;
            }
            let (hist, notes) = if with_context { context(&mut r, profile, &gold) } else { (vec![], vec![]) };
            out.push(AnnotatedExample {
                id: id_base + out.len() as u64,
                instruction: if with_context { instruction.to_string() } else { String::new() },
                rules: if with_context { rules.clone() } else { BusinessRules::default() },
                hist,
                notes,
                query,
                gold,
                coverage: full_coverage(),
            });
        }
        Ok(out)
    };

    let unified = split("corpus-unified", sizes.n_unified, 0, true)?;
    let golden = split("corpus-golden", sizes.n_golden, GOLDEN_ID_BASE, true)?;
    let pool = split("corpus-pool", sizes.n_pool, POOL_ID_BASE, true)?;
    let qlog = split("corpus-qlog", sizes.n_qlog, QLOG_ID_BASE, false)?;
    Ok(Corpus { unified, qlog, golden, pool })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{validate, Ontology, Schema, Taxonomy};

    fn schema(p: &CorpusProfile) -> Schema {
        let types: Vec<String> = p.entities.iter().map(|e| e.etype.clone()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        Schema { ontology: Ontology::from_labels(types), taxonomy: Taxonomy::from_labels(p.categories()) }
    }

    #[test]
    fn deterministic_counts_and_valid() {
        let p = CorpusProfile::default();
        let sizes = CorpusSizes { n_unified: 100, n_qlog: 300, n_golden: 25, n_pool: 40 };
        let a = generate_corpus(7, sizes, &p, "I", &BusinessRules::default()).unwrap();
        let b = generate_corpus(7, sizes, &p, "I", &BusinessRules::default()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!((a.unified.len(), a.qlog.len(), a.golden.len(), a.pool.len()), (100, 300, 25, 40));
        let s = schema(&p);
        let mut all = HashSet::new();
        for ex in a.unified.iter().chain(&a.qlog).chain(&a.golden).chain(&a.pool) {
            assert!(all.insert(ex.query.clone()), "duplicate query {}", ex.query);
            assert_eq!(validate(&ex.gold, &ex.query, &s), vec![], "{}", ex.query);
        }
        let c = generate_corpus(8, sizes, &p, "I", &BusinessRules::default()).unwrap();
        assert_ne!(a.unified, c.unified);
    }

    #[test]
    fn empty_request_rejected() {
        let sizes = CorpusSizes { n_unified: 0, n_qlog: 1, n_golden: 1, n_pool: 1 };
        assert!(matches!(
            generate_corpus(1, sizes, &CorpusProfile::default(), "", &BusinessRules::default()),
            Err(GenerateError::Empty)
        ));
    }
}
