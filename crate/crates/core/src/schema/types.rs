use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Half-open range of Unicode scalar indices into a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn is_valid_for(&self, query_len: usize) -> bool {
        self.start < self.end && self.end <= query_len
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.start, self.end)
    }
}

/// Number of Unicode scalar values in `text`.
pub fn char_len(text: &str) -> usize {
    text.chars().count()
}

/// Substring by scalar indices. Returns `None` when the span does not fit.
pub fn char_slice(text: &str, span: Span) -> Option<&str> {
    if span.start > span.end {
        return None;
    }
    let mut indices = text.char_indices().map(|(i, _)| i).chain(std::iter::once(text.len()));
    let start = indices.nth(span.start)?;
    let end = if span.end == span.start {
        start
    } else {
        indices.nth(span.end - span.start - 1)?
    };
    Some(&text[start..end])
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntityMention {
    pub span: Span,
    pub etype: String,
    /// Query text covered by `span`.
    pub surface: String,
}

impl EntityMention {
    pub fn new(surface: impl Into<String>, etype: impl Into<String>, start: usize, end: usize) -> Self {
        Self {
            span: Span::new(start, end),
            etype: etype.into(),
            surface: surface.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Segment {
    pub span: Span,
    pub surface: String,
}

/// Builds the segment list for consecutive surfaces, computing spans cumulatively.
pub fn segments_from_surfaces<S: AsRef<str>>(surfaces: &[S]) -> Vec<Segment> {
    let mut pos = 0;
    surfaces
        .iter()
        .map(|s| {
            let s = s.as_ref();
            let len = char_len(s);
            let seg = Segment {
                span: Span::new(pos, pos + len),
                surface: s.to_string(),
            };
            pos += len;
            seg
        })
        .collect()
}

/// 4-tier term importance: 0 functional stop word ... 3 core intent carrier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct TermWeightLevel(u8);

impl TermWeightLevel {
    pub const STOP: Self = Self(0);
    pub const LOW: Self = Self(1);
    pub const MID: Self = Self(2);
    pub const CORE: Self = Self(3);

    pub fn new(level: u8) -> Option<Self> {
        (level <= 3).then_some(Self(level))
    }

    pub fn get(self) -> u8 {
        self.0
    }
}

impl TryFrom<u8> for TermWeightLevel {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Self::new(v).ok_or_else(|| format!("term weight level {v} outside 0..=3"))
    }
}

impl From<TermWeightLevel> for u8 {
    fn from(v: TermWeightLevel) -> u8 {
        v.0
    }
}

/// Ranked category labels; index 0 is the dominant intent.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaxonomyLabels(pub Vec<String>);

impl TaxonomyLabels {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Self {
        Self(labels.into_iter().map(Into::into).collect())
    }

    pub fn top1(&self) -> Option<&str> {
        self.0.first().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }
}

/// Unified structured result, fields in generation order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct QPOutput {
    pub entities: Vec<EntityMention>,
    pub segments: Vec<Segment>,
    pub weights: Vec<TermWeightLevel>,
    pub category: TaxonomyLabels,
    pub intent_desc: String,
}

impl QPOutput {
    /// The query implied by the segmentation (concatenated surfaces).
    pub fn segmented_query(&self) -> String {
        self.segments.iter().map(|s| s.surface.as_str()).collect()
    }

    pub fn segment_spans(&self) -> Vec<Span> {
        self.segments.iter().map(|s| s.span).collect()
    }
}

/// The five sub-tasks in generation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubTask {
    Ner,
    Seg,
    Tw,
    Taxo,
    Intent,
}

impl SubTask {
    pub const ALL: [SubTask; 5] = [SubTask::Ner, SubTask::Seg, SubTask::Tw, SubTask::Taxo, SubTask::Intent];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            SubTask::Ner => "ner",
            SubTask::Seg => "seg",
            SubTask::Tw => "tw",
            SubTask::Taxo => "taxo",
            SubTask::Intent => "intent",
        }
    }

    /// JSON keys that carry this sub-task's result.
    pub fn keys(self) -> &'static [&'static str] {
        match self {
            SubTask::Ner => &["entities"],
            SubTask::Seg => &["segments"],
            SubTask::Tw => &["segments", "weights"],
            SubTask::Taxo => &["category"],
            SubTask::Intent => &["intent_desc"],
        }
    }
}

impl fmt::Display for SubTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SubTask {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SubTask::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown sub-task `{s}`"))
    }
}

pub type Coverage = BTreeSet<SubTask>;

pub fn full_coverage() -> Coverage {
    SubTask::ALL.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelDef {
    pub label: String,
    #[serde(default)]
    pub definition: String,
}

/// Entity types the NER sub-task may emit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct Ontology(pub Vec<LabelDef>);

/// Category labels the taxonomy sub-task may emit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct Taxonomy(pub Vec<LabelDef>);

macro_rules! label_set {
    ($ty:ident) => {
        impl $ty {
            pub fn contains(&self, label: &str) -> bool {
                self.0.iter().any(|d| d.label == label)
            }

            pub fn labels(&self) -> impl Iterator<Item = &str> {
                self.0.iter().map(|d| d.label.as_str())
            }

            pub fn from_labels<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Self {
                Self(
                    labels
                        .into_iter()
                        .map(|l| LabelDef { label: l.into(), definition: String::new() })
                        .collect(),
                )
            }

            pub fn check(&self) -> Result<(), String> {
                let mut seen = BTreeSet::new();
                for d in &self.0 {
                    if d.label.is_empty() {
                        return Err(format!("{}: empty label", stringify!($ty)));
                    }
                    if !seen.insert(d.label.as_str()) {
                        return Err(format!("{}: duplicate label `{}`", stringify!($ty), d.label));
                    }
                }
                Ok(())
            }
        }
    };
}

label_set!(Ontology);
label_set!(Taxonomy);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleText {
    pub name: String,
    pub text: String,
}

/// Named operator-editable rule texts, included verbatim in prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct BusinessRules(pub Vec<RuleText>);

impl BusinessRules {
    pub fn check(&self) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for r in &self.0 {
            if !seen.insert(r.name.as_str()) {
                return Err(format!("duplicate rule name `{}`", r.name));
            }
            if r.text.trim().is_empty() {
                return Err(format!("rule `{}` has empty text", r.name));
            }
        }
        Ok(())
    }
}

/// Label vocabularies a parsed output is checked against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Schema {
    pub ontology: Ontology,
    pub taxonomy: Taxonomy,
}

/// One supervised instance: prompt context, query and gold output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedExample {
    pub id: u64,
    #[serde(default)]
    pub instruction: String,
    #[serde(default)]
    pub rules: BusinessRules,
    #[serde(default)]
    pub hist: Vec<String>,
    #[serde(default)]
    pub notes: Vec<String>,
    pub query: String,
    pub gold: QPOutput,
    pub coverage: Coverage,
}

impl AnnotatedExample {
    pub fn is_unified(&self) -> bool {
        self.coverage.len() == SubTask::ALL.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn char_slice_handles_mixed_script() {
        let q = "ysl口红推荐";
        assert_eq!(char_len(q), 7);
        assert_eq!(char_slice(q, Span::new(0, 3)), Some("ysl"));
        assert_eq!(char_slice(q, Span::new(3, 5)), Some("口红"));
        assert_eq!(char_slice(q, Span::new(5, 7)), Some("推荐"));
        assert_eq!(char_slice(q, Span::new(5, 8)), None);
        assert_eq!(char_slice(q, Span::new(7, 7)), Some(""));
    }

    #[test]
    fn weight_level_range() {
        assert!(TermWeightLevel::new(3).is_some());
        assert!(TermWeightLevel::new(4).is_none());
        assert!(serde_json::from_str::<TermWeightLevel>("7").is_err());
    }

    #[test]
    fn subtask_names_roundtrip() {
        for t in SubTask::ALL {
            assert_eq!(t.name().parse::<SubTask>().unwrap(), t);
        }
    }
}
