//! Rule-based stand-ins for the separate per-task production models, used to
//! pseudo-label logged queries, plus the synthetic corpus generator.

mod corpus;
mod profile;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::schema::{
    char_len, segments_from_surfaces, AnnotatedExample, BusinessRules, EntityMention, QPOutput, Segment, Span,
    SubTask, TaxonomyLabels, TermWeightLevel,
};

pub use corpus::{generate_corpus, generate_query, Corpus, CorpusSizes, GenerateError};
pub use profile::{CorpusProfile, EntityWord, NounWord, SuffixWord};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Lexicon {
    /// Surface -> corpus frequency.
    pub terms: BTreeMap<String, u64>,
    #[serde(default)]
    pub stopwords: BTreeSet<String>,
}

impl Lexicon {
    pub fn check(&self) -> Result<(), String> {
        if let Some(s) = self.stopwords.iter().find(|s| !self.terms.contains_key(*s)) {
            return Err(format!("stopword `{s}` missing from lexicon terms"));
        }
        if self.terms.keys().any(|t| t.is_empty()) {
            return Err("empty lexicon term".into());
        }
        Ok(())
    }

    pub fn max_term_chars(&self) -> usize {
        self.terms.keys().map(|t| char_len(t)).max().unwrap_or(0)
    }

    pub fn freq(&self, term: &str) -> u64 {
        self.terms.get(term).copied().unwrap_or(0)
    }
}

/// Surface -> entity type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct Gazetteer(pub BTreeMap<String, String>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordEntry {
    pub category: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct KeywordTaxonomyMap(pub BTreeMap<String, KeywordEntry>);

/// Probability that a pseudo-label is deliberately corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    pub rate: f64,
}

impl Default for NoiseProfile {
    fn default() -> Self {
        Self { rate: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegacyConfig {
    pub lexicon: Lexicon,
    pub gazetteer: Gazetteer,
    pub keywords: KeywordTaxonomyMap,
    pub fallback_category: String,
    pub max_labels: usize,
    /// Quantile of lexicon frequencies separating level 2 (rarer) from level 1.
    pub low_freq_quantile: f64,
    /// Query suffix -> intent phrase.
    pub intent_phrases: BTreeMap<String, String>,
    pub default_intent: String,
    #[serde(default)]
    pub noise: NoiseProfile,
}

impl LegacyConfig {
    /// Resources a legacy system would have accumulated before the emerging
    /// entities of `profile` appeared.
    pub fn from_profile(profile: &CorpusProfile, fallback_category: &str) -> Self {
        let mut terms = BTreeMap::new();
        for (i, n) in profile.nouns.iter().enumerate() {
            terms.insert(n.surface.clone(), 300 + (i as u64 * 37) % 500);
        }
        for (i, m) in profile.modifiers.iter().enumerate() {
            terms.insert(m.clone(), 60 + (i as u64 * 13) % 120);
        }
        for s in &profile.suffixes {
            terms.insert(s.surface.clone(), 900);
        }
        terms.insert(profile.stopword.clone(), 5000);
        let mut gazetteer = BTreeMap::new();
        let mut keywords = BTreeMap::new();
        for (i, e) in profile.entities.iter().filter(|e| !e.emerging).enumerate() {
            terms.insert(e.surface.clone(), 100 + (i as u64 * 17) % 300);
            gazetteer.insert(e.surface.clone(), e.etype.clone());
            keywords.insert(e.surface.clone(), KeywordEntry { category: e.category.clone(), weight: 1.0 });
        }
        for n in &profile.nouns {
            keywords.insert(n.surface.clone(), KeywordEntry { category: n.category.clone(), weight: 2.0 });
        }
        Self {
            lexicon: Lexicon { terms, stopwords: [profile.stopword.clone()].into_iter().collect() },
            gazetteer: Gazetteer(gazetteer),
            keywords: KeywordTaxonomyMap(keywords),
            fallback_category: fallback_category.to_string(),
            max_labels: 3,
            low_freq_quantile: 0.5,
            intent_phrases: profile.suffixes.iter().map(|s| (s.surface.clone(), s.intent.clone())).collect(),
            default_intent: profile.default_intent.clone(),
            noise: NoiseProfile::default(),
        }
    }

    pub fn check(&self) -> Result<(), String> {
        self.lexicon.check()?;
        if self.gazetteer.0.keys().any(|s| s.is_empty()) {
            return Err("empty gazetteer surface".into());
        }
        if !(0.0..=1.0).contains(&self.low_freq_quantile) {
            return Err("low_freq_quantile outside [0,1]".into());
        }
        if !(0.0..=1.0).contains(&self.noise.rate) {
            return Err("noise rate outside [0,1]".into());
        }
        if self.max_labels == 0 {
            return Err("max_labels must be positive".into());
        }
        Ok(())
    }
}

/// Forward maximum matching: longest lexicon term at each position, falling
/// back to a single character.
pub fn max_match_segment(query: &str, lexicon: &Lexicon) -> Vec<Span> {
    let chars: Vec<char> = query.chars().collect();
    let max_len = lexicon.max_term_chars();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let mut take = 1;
        for len in (2..=max_len.min(chars.len() - i)).rev() {
            let cand: String = chars[i..i + len].iter().collect();
            if lexicon.terms.contains_key(&cand) {
                take = len;
                break;
            }
        }
        spans.push(Span::new(i, i + take));
        i += take;
    }
    spans
}

/// Longest non-overlapping gazetteer matches; equal lengths prefer the
/// leftmost start. Output sorted by start.
pub fn gazetteer_ner(query: &str, gazetteer: &Gazetteer) -> Vec<EntityMention> {
    let chars: Vec<char> = query.chars().collect();
    let max_len = gazetteer.0.keys().map(|s| char_len(s)).max().unwrap_or(0);
    let mut matches = Vec::new();
    for start in 0..chars.len() {
        for len in 1..=max_len.min(chars.len() - start) {
            let cand: String = chars[start..start + len].iter().collect();
            if let Some(t) = gazetteer.0.get(&cand) {
                matches.push((Span::new(start, start + len), cand, t.clone()));
            }
        }
    }
    matches.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.start.cmp(&b.0.start)));
    let mut chosen: Vec<EntityMention> = Vec::new();
    for (span, surface, etype) in matches {
        if chosen.iter().all(|e| !e.span.overlaps(&span)) {
            chosen.push(EntityMention { span, etype, surface });
        }
    }
    chosen.sort_by_key(|e| e.span.start);
    chosen
}

/// Frequency at the given quantile of the non-stopword lexicon terms
/// (lower nearest rank).
pub fn frequency_threshold(lexicon: &Lexicon, quantile: f64) -> u64 {
    let mut freqs: Vec<u64> = lexicon
        .terms
        .iter()
        .filter(|(t, _)| !lexicon.stopwords.contains(*t))
        .map(|(_, f)| *f)
        .collect();
    if freqs.is_empty() {
        return 0;
    }
    freqs.sort_unstable();
    let idx = (quantile * (freqs.len() - 1) as f64).floor() as usize;
    freqs[idx.min(freqs.len() - 1)]
}

/// Stopword -> 0; inside an entity -> 3; rarer than `threshold` -> 2; else 1.
pub fn heuristic_term_weight(
    segments: &[Segment],
    entities: &[EntityMention],
    lexicon: &Lexicon,
    threshold: u64,
) -> Vec<TermWeightLevel> {
    segments
        .iter()
        .map(|s| {
            if lexicon.stopwords.contains(&s.surface) {
                TermWeightLevel::STOP
            } else if entities.iter().any(|e| e.span.start <= s.span.start && s.span.end <= e.span.end) {
                TermWeightLevel::CORE
            } else if lexicon.freq(&s.surface) < threshold {
                TermWeightLevel::MID
            } else {
                TermWeightLevel::LOW
            }
        })
        .collect()
}

/// Categories ranked by summed keyword weight (ties by label); `fallback`
/// when nothing matches.
pub fn keyword_taxonomy(query: &str, map: &KeywordTaxonomyMap, fallback: &str, max_labels: usize) -> TaxonomyLabels {
    let mut sums: BTreeMap<&str, f64> = BTreeMap::new();
    for (kw, entry) in &map.0 {
        let hits = query.matches(kw.as_str()).count();
        if hits > 0 {
            *sums.entry(entry.category.as_str()).or_default() += entry.weight * hits as f64;
        }
    }
    let mut ranked: Vec<(&str, f64)> = sums.into_iter().filter(|(_, w)| *w > 0.0).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
    if ranked.is_empty() {
        return TaxonomyLabels::new([fallback]);
    }
    TaxonomyLabels::new(ranked.into_iter().take(max_labels.max(1)).map(|(c, _)| c))
}

/// Intent phrase of the longest matching query suffix.
pub fn suffix_intent(query: &str, phrases: &BTreeMap<String, String>, default: &str) -> String {
    phrases
        .iter()
        .filter(|(suffix, _)| query.ends_with(suffix.as_str()))
        .max_by_key(|(suffix, _)| char_len(suffix))
        .map(|(_, p)| p.clone())
        .unwrap_or_else(|| default.to_string())
}

#[derive(Debug, Clone)]
pub struct LegacyPipeline {
    cfg: LegacyConfig,
    threshold: u64,
}

impl LegacyPipeline {
    pub fn new(cfg: LegacyConfig) -> Result<Self, String> {
        cfg.check()?;
        let threshold = frequency_threshold(&cfg.lexicon, cfg.low_freq_quantile);
        Ok(Self { cfg, threshold })
    }

    pub fn config(&self) -> &LegacyConfig {
        &self.cfg
    }

    pub fn segment(&self, query: &str) -> Vec<Segment> {
        let chars: Vec<char> = query.chars().collect();
        let surfaces: Vec<String> = max_match_segment(query, &self.cfg.lexicon)
            .into_iter()
            .map(|s| chars[s.start..s.end].iter().collect())
            .collect();
        segments_from_surfaces(&surfaces)
    }

    pub fn ner(&self, query: &str) -> Vec<EntityMention> {
        gazetteer_ner(query, &self.cfg.gazetteer)
    }

    pub fn taxonomy(&self, query: &str) -> TaxonomyLabels {
        keyword_taxonomy(query, &self.cfg.keywords, &self.cfg.fallback_category, self.cfg.max_labels)
    }

    pub fn intent(&self, query: &str) -> String {
        suffix_intent(query, &self.cfg.intent_phrases, &self.cfg.default_intent)
    }

    /// All five sub-task models on one query.
    pub fn run(&self, query: &str) -> QPOutput {
        let entities = self.ner(query);
        let segments = self.segment(query);
        let weights = heuristic_term_weight(&segments, &entities, &self.cfg.lexicon, self.threshold);
        QPOutput { entities, segments, weights, category: self.taxonomy(query), intent_desc: self.intent(query) }
    }

    /// Only sub-task `task`'s model; other fields stay empty.
    pub fn run_task(&self, query: &str, task: SubTask) -> QPOutput {
        let mut out = QPOutput::default();
        match task {
            SubTask::Ner => out.entities = self.ner(query),
            SubTask::Seg => out.segments = self.segment(query),
            SubTask::Tw => {
                out.segments = self.segment(query);
                out.weights = heuristic_term_weight(&out.segments, &self.ner(query), &self.cfg.lexicon, self.threshold);
            }
            SubTask::Taxo => out.category = self.taxonomy(query),
            SubTask::Intent => out.intent_desc = self.intent(query),
        }
        out
    }

    /// Single-task auxiliary example for `query`, with seeded label corruption
    /// at the configured noise rate.
    pub fn pseudo_label(&self, id: u64, query: &str, task: SubTask, seed: u64) -> AnnotatedExample {
        let mut gold = self.run_task(query, task);
        let mut r = rng::stream(seed, "pseudo-label-noise", &[id, task.index() as u64]);
        if r.gen::<f64>() < self.cfg.noise.rate {
            self.corrupt(&mut gold, query, task, &mut r);
        }
        AnnotatedExample {
            id,
            instruction: String::new(),
            rules: BusinessRules::default(),
            hist: vec![],
            notes: vec![],
            query: query.to_string(),
            gold,
            coverage: [task].into_iter().collect(),
        }
    }

    fn corrupt(&self, out: &mut QPOutput, query: &str, task: SubTask, r: &mut rng::Rng) {
        match task {
            SubTask::Ner => {
                if out.entities.is_empty() {
                    let types: BTreeSet<&String> = self.cfg.gazetteer.0.values().collect();
                    if let (Some(t), Some(c)) = (types.into_iter().next(), query.chars().next()) {
                        out.entities.push(EntityMention::new(c.to_string(), t.clone(), 0, 1));
                    }
                } else {
                    let i = r.gen_range(0..out.entities.len());
                    out.entities.remove(i);
                }
            }
            SubTask::Seg | SubTask::Tw => {
                if task == SubTask::Tw && !out.weights.is_empty() {
                    let i = r.gen_range(0..out.weights.len());
                    let shift = r.gen_range(1..4u8);
                    out.weights[i] = TermWeightLevel::new((out.weights[i].get() + shift) % 4).unwrap();
                    return;
                }
                let mut surfaces: Vec<String> = out.segments.iter().map(|s| s.surface.clone()).collect();
                if surfaces.len() >= 2 {
                    let i = r.gen_range(0..surfaces.len() - 1);
                    let next = surfaces.remove(i + 1);
                    surfaces[i].push_str(&next);
                } else if let Some(only) = surfaces.first().cloned().filter(|s| char_len(s) >= 2) {
                    let mut it = only.chars();
                    let head = it.next().unwrap().to_string();
                    surfaces = vec![head, it.collect()];
                }
                out.segments = segments_from_surfaces(&surfaces);
            }
            SubTask::Taxo => {
                let known: BTreeSet<&str> = self
                    .cfg
                    .keywords
                    .0
                    .values()
                    .map(|k| k.category.as_str())
                    .chain([self.cfg.fallback_category.as_str()])
                    .collect();
                let candidates: Vec<&str> = known.into_iter().filter(|c| !out.category.0.iter().any(|l| l == c)).collect();
                if let Some(c) = candidates.choose(r) {
                    out.category.0[0] = c.to_string();
                } else if out.category.len() >= 2 {
                    out.category.0.swap(0, 1);
                }
            }
            SubTask::Intent => {
                let alternatives: Vec<&String> = self
                    .cfg
                    .intent_phrases
                    .values()
                    .chain([&self.cfg.default_intent])
                    .filter(|p| **p != out.intent_desc)
                    .collect();
                if let Some(p) = alternatives.choose(r) {
                    out.intent_desc = (*p).clone();
                }
            }
        }
    }
}

/// Pseudo-labels every logged query for every sub-task (|Q|·|T| examples).
/// Example ids are `query_id * 8 + task`.
pub fn pseudo_label_all(pipeline: &LegacyPipeline, qlog: &[AnnotatedExample], seed: u64) -> Vec<AnnotatedExample> {
    qlog.iter()
        .flat_map(|q| {
            SubTask::ALL
                .into_iter()
                .map(move |t| pipeline.pseudo_label(q.id * 8 + t.index() as u64, &q.query, t, seed))
        })
        .collect()
}

/// Per-task fraction of pseudo-labels that disagree with the hidden gold of
/// the logged queries, in [`SubTask::ALL`] order.
pub fn noise_rates(aux: &[AnnotatedExample], qlog: &[AnnotatedExample]) -> [f64; 5] {
    let gold: BTreeMap<&str, &QPOutput> = qlog.iter().map(|q| (q.query.as_str(), &q.gold)).collect();
    let mut wrong = [0usize; 5];
    let mut total = [0usize; 5];
    for ex in aux {
        let Some(g) = gold.get(ex.query.as_str()) else { continue };
        for t in &ex.coverage {
            total[t.index()] += 1;
            if !task_agrees(&ex.gold, g, *t) {
                wrong[t.index()] += 1;
            }
        }
    }
    let mut out = [0.0; 5];
    for i in 0..5 {
        if total[i] > 0 {
            out[i] = wrong[i] as f64 / total[i] as f64;
        }
    }
    out
}

fn task_agrees(a: &QPOutput, b: &QPOutput, task: SubTask) -> bool {
    match task {
        SubTask::Ner => a.entities == b.entities,
        SubTask::Seg => a.segments == b.segments,
        SubTask::Tw => a.segments == b.segments && a.weights == b.weights,
        SubTask::Taxo => a.category == b.category,
        SubTask::Intent => a.intent_desc == b.intent_desc,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lex(words: &[&str]) -> Lexicon {
        Lexicon { terms: words.iter().map(|w| (w.to_string(), 1)).collect(), stopwords: BTreeSet::new() }
    }

    /// Every way to cut `query` into lexicon words or single characters.
    fn all_segmentations(chars: &[char], lexicon: &Lexicon) -> Vec<Vec<usize>> {
        if chars.is_empty() {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for len in 1..=chars.len() {
            let w: String = chars[..len].iter().collect();
            if len == 1 || lexicon.terms.contains_key(&w) {
                for mut rest in all_segmentations(&chars[len..], lexicon) {
                    rest.insert(0, len);
                    out.push(rest);
                }
            }
        }
        out
    }

    #[test]
    fn max_match_examples() {
        assert_eq!(max_match_segment("口红推荐", &lex(&["口红推荐"])), vec![Span::new(0, 4)]);
        assert_eq!(
            max_match_segment("abc", &Lexicon::default()),
            vec![Span::new(0, 1), Span::new(1, 2), Span::new(2, 3)]
        );
        let l = lex(&["ab", "abc", "d"]);
        let got = max_match_segment("abcd", &l);
        assert_eq!(got, vec![Span::new(0, 3), Span::new(3, 4)]);
        // Oracle: among all valid segmentations, the one whose length sequence
        // is lexicographically greatest is the forward-longest-first choice.
        let chars: Vec<char> = "abcd".chars().collect();
        let best = all_segmentations(&chars, &l).into_iter().max().unwrap();
        assert_eq!(got.iter().map(|s| s.len()).collect::<Vec<_>>(), best);
    }

    #[test]
    fn gazetteer_examples() {
        assert!(gazetteer_ner("1c1 swatch", &Gazetteer::default()).is_empty());
        let g = Gazetteer([("1c1".to_string(), "PRODUCT_SERIES".to_string())].into_iter().collect());
        assert_eq!(gazetteer_ner("1c1 swatch", &g), vec![EntityMention::new("1c1", "PRODUCT_SERIES", 0, 3)]);
        let g = Gazetteer(
            [("ab", "BRAND"), ("abc", "BRAND")].iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
        );
        assert_eq!(gazetteer_ner("xabc", &g), vec![EntityMention::new("abc", "BRAND", 1, 4)]);
    }

    #[test]
    fn gazetteer_matches_exhaustive_oracle() {
        use rand::Rng;
        let alphabet = ['a', 'b', 'c'];
        for seed in 0..300u64 {
            let mut r = rng::stream(seed, "gaz-oracle", &[]);
            let mut gaz = BTreeMap::new();
            for _ in 0..r.gen_range(0..5) {
                let len = r.gen_range(1..4);
                let w: String = (0..len).map(|_| alphabet[r.gen_range(0..3)]).collect();
                gaz.insert(w, "BRAND".to_string());
            }
            let q: String = (0..r.gen_range(0..9)).map(|_| alphabet[r.gen_range(0..3)]).collect();
            let g = Gazetteer(gaz);
            let got = gazetteer_ner(&q, &g);
            // every occurrence of every entry, by brute force over all substrings
            let chars: Vec<char> = q.chars().collect();
            let mut occ = Vec::new();
            for a in 0..chars.len() {
                for b in a + 1..=chars.len() {
                    let s: String = chars[a..b].iter().collect();
                    if g.0.contains_key(&s) {
                        occ.push(Span::new(a, b));
                    }
                }
            }
            for (i, e) in got.iter().enumerate() {
                assert!(occ.contains(&e.span));
                assert!(got[i + 1..].iter().all(|o| !o.span.overlaps(&e.span)));
            }
            // each skipped occurrence is blocked by an earlier-ranked choice:
            // strictly longer, or equally long and further left
            for o in occ.iter().filter(|o| !got.iter().any(|e| e.span == **o)) {
                assert!(
                    got.iter().any(|e| e.span.overlaps(o)
                        && (e.span.len() > o.len() || (e.span.len() == o.len() && e.span.start < o.start))),
                    "seed {seed}: {o} not blocked in {q}"
                );
            }
        }
    }

    #[test]
    fn term_weight_rules() {
        let mut l = lex(&["的", "口红", "平价", "推荐"]);
        l.stopwords.insert("的".into());
        l.terms.insert("口红".into(), 500);
        l.terms.insert("平价".into(), 50);
        l.terms.insert("推荐".into(), 900);
        // non-stopword freqs sorted: [50, 500, 900]; median (q=0.5) -> index 1 -> 500
        let th = frequency_threshold(&l, 0.5);
        assert_eq!(th, 500);
        let segs = segments_from_surfaces(&["平价", "的", "兰蔻", "口红", "推荐"]);
        let ents = vec![EntityMention::new("兰蔻", "BRAND", 3, 5)];
        let w: Vec<u8> = heuristic_term_weight(&segs, &ents, &l, th).into_iter().map(|w| w.get()).collect();
        assert_eq!(w, vec![2, 0, 3, 1, 1]);
        let segs = segments_from_surfaces(&["的", "的"]);
        let w: Vec<u8> = heuristic_term_weight(&segs, &[], &l, th).into_iter().map(|w| w.get()).collect();
        assert_eq!(w, vec![0, 0]);
    }

    #[test]
    fn keyword_taxonomy_ranking() {
        let m = KeywordTaxonomyMap(
            [("口红", "Beauty", 3.0), ("成都", "Travel", 2.0), ("火锅", "Food", 2.0)]
                .iter()
                .map(|(k, c, w)| (k.to_string(), KeywordEntry { category: c.to_string(), weight: *w }))
                .collect(),
        );
        assert_eq!(keyword_taxonomy("xyz", &m, "General", 3), TaxonomyLabels::new(["General"]));
        assert_eq!(keyword_taxonomy("口红", &m, "General", 3), TaxonomyLabels::new(["Beauty"]));
        assert_eq!(keyword_taxonomy("成都口红", &m, "General", 3), TaxonomyLabels::new(["Beauty", "Travel"]));
        // equal sums 2 vs 2 -> lexicographic
        assert_eq!(keyword_taxonomy("成都火锅", &m, "General", 3), TaxonomyLabels::new(["Food", "Travel"]));
        assert_eq!(keyword_taxonomy("成都火锅", &m, "General", 1), TaxonomyLabels::new(["Food"]));
    }

    #[test]
    fn pseudo_label_coverage_and_validity() {
        let profile = CorpusProfile::default();
        let p = LegacyPipeline::new(LegacyConfig::from_profile(&profile, "General")).unwrap();
        for t in SubTask::ALL {
            let ex = p.pseudo_label(7, "平价兰蔻口红推荐", t, 1);
            assert_eq!(ex.coverage, [t].into_iter().collect());
            let v = crate::schema::validate_covered(&ex.gold, &ex.query, None, &ex.coverage);
            assert!(v.iter().all(|v| v.is_warning()), "{t}: {v:?}");
        }
    }
}
