//! Canonical JSON for [`QPOutput`]: compact, keys in generation order
//! (`entities`, `segments`, `weights`, `category`, `intent_desc`).
//!
//! Entities are `[surface, type, start, end]` records. Segments are written as
//! surfaces only; their spans follow from the partition.

use std::collections::BTreeSet;

use serde::de::Deserializer;
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::types::*;
use super::validate::{validate_covered, Violation};

pub const KEYS: [&str; 5] = ["entities", "segments", "weights", "category", "intent_desc"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
    #[error("missing key `{0}`")]
    MissingKey(&'static str),
    #[error("unexpected key `{0}`")]
    UnexpectedKey(String),
    #[error("value of `{0}` has the wrong shape")]
    WrongType(&'static str),
    #[error("span ({start},{end}) out of range for a {len}-char query")]
    SpanOutOfRange { start: u64, end: u64, len: usize },
    #[error("entity surface `{0}` does not match the query at its span")]
    EntitySurfaceMismatch(String),
    #[error("entities overlap")]
    OverlappingEntities,
    #[error("segments do not partition the query")]
    SegmentsNotPartition,
    #[error("{weights} weights for {segments} segments")]
    WeightsLengthMismatch { segments: usize, weights: usize },
    #[error("invalid term weight {0}")]
    InvalidWeight(i64),
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("empty category list")]
    EmptyCategory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    #[default]
    Strict,
    /// Pads/truncates weights to the segment count (padding with level 1) and
    /// drops entities whose spans fall outside the query.
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Repair {
    WeightsPadded { from: usize, to: usize },
    WeightsTruncated { from: usize, to: usize },
    DroppedEntity { start: u64, end: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid output: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
pub struct ValidationError(pub Vec<Violation>);

/// Canonical text of a full output. Fails if structural invariants are broken.
pub fn serialize_output(out: &QPOutput) -> Result<String, ValidationError> {
    let query = out.segmented_query();
    let errors: Vec<_> = validate_covered(out, &query, None, &full_coverage())
        .into_iter()
        .filter(|v| !v.is_warning())
        .collect();
    if !errors.is_empty() {
        return Err(ValidationError(errors));
    }
    Ok(write_keys(out, &full_coverage()))
}

/// Canonical text restricted to the keys of the covered sub-tasks, still in
/// generation order. Used for single-task targets. No validation.
pub fn serialize_covered(out: &QPOutput, coverage: &Coverage) -> String {
    write_keys(out, coverage)
}

fn write_keys(out: &QPOutput, coverage: &Coverage) -> String {
    let wanted: BTreeSet<&str> = coverage.iter().flat_map(|t| t.keys().iter().copied()).collect();
    let mut s = String::with_capacity(128);
    s.push('{');
    let mut first = true;
    for key in KEYS.iter().filter(|k| wanted.contains(*k)) {
        if !first {
            s.push(',');
        }
        first = false;
        s.push('"');
        s.push_str(key);
        s.push_str("\":");
        let value = match *key {
            "entities" => {
                let recs: Vec<(&str, &str, usize, usize)> = out
                    .entities
                    .iter()
                    .map(|e| (e.surface.as_str(), e.etype.as_str(), e.span.start, e.span.end))
                    .collect();
                serde_json::to_string(&recs)
            }
            "segments" => {
                let surf: Vec<&str> = out.segments.iter().map(|s| s.surface.as_str()).collect();
                serde_json::to_string(&surf)
            }
            "weights" => {
                let w: Vec<u8> = out.weights.iter().map(|w| w.get()).collect();
                serde_json::to_string(&w)
            }
            "category" => serde_json::to_string(&out.category.0),
            _ => serde_json::to_string(&out.intent_desc),
        };
        s.push_str(&value.expect("plain data always serializes"));
    }
    s.push('}');
    s
}

/// Strict parse of generated text against `query`.
pub fn parse_output(text: &str, query: &str, schema: &Schema) -> Result<QPOutput, ParseError> {
    parse_output_with(text, query, schema, ParseMode::Strict).map(|(o, _)| o)
}

pub fn parse_output_with(
    text: &str,
    query: &str,
    schema: &Schema,
    mode: ParseMode,
) -> Result<(QPOutput, Vec<Repair>), ParseError> {
    let value: Value = serde_json::from_str(text).map_err(|e| ParseError::MalformedJson(e.to_string()))?;
    let obj = match value {
        Value::Object(m) => m,
        _ => return Err(ParseError::MalformedJson("top-level value is not an object".into())),
    };
    for key in KEYS {
        if !obj.contains_key(key) {
            return Err(ParseError::MissingKey(key));
        }
    }
    if let Some(extra) = obj.keys().find(|k| !KEYS.contains(&k.as_str())) {
        return Err(ParseError::UnexpectedKey(extra.clone()));
    }

    let qlen = char_len(query);
    let mut repairs = Vec::new();

    let mut entities = Vec::new();
    for rec in obj["entities"].as_array().ok_or(ParseError::WrongType("entities"))? {
        let fields = rec.as_array().filter(|a| a.len() == 4).ok_or(ParseError::WrongType("entities"))?;
        let surface = fields[0].as_str().ok_or(ParseError::WrongType("entities"))?;
        let etype = fields[1].as_str().ok_or(ParseError::WrongType("entities"))?;
        let start = fields[2].as_u64().ok_or(ParseError::WrongType("entities"))?;
        let end = fields[3].as_u64().ok_or(ParseError::WrongType("entities"))?;
        if !schema.ontology.contains(etype) {
            return Err(ParseError::UnknownLabel(etype.to_string()));
        }
        if !(start < end && end <= qlen as u64) {
            if mode == ParseMode::Lenient {
                repairs.push(Repair::DroppedEntity { start, end });
                continue;
            }
            return Err(ParseError::SpanOutOfRange { start, end, len: qlen });
        }
        let span = Span::new(start as usize, end as usize);
        if char_slice(query, span) != Some(surface) {
            return Err(ParseError::EntitySurfaceMismatch(surface.to_string()));
        }
        if entities.iter().any(|e: &EntityMention| e.span.overlaps(&span)) {
            return Err(ParseError::OverlappingEntities);
        }
        entities.push(EntityMention { span, etype: etype.to_string(), surface: surface.to_string() });
    }

    let surfaces: Vec<&str> = obj["segments"]
        .as_array()
        .ok_or(ParseError::WrongType("segments"))?
        .iter()
        .map(|v| v.as_str().ok_or(ParseError::WrongType("segments")))
        .collect::<Result<_, _>>()?;
    if surfaces.iter().any(|s| s.is_empty()) || surfaces.concat() != query {
        return Err(ParseError::SegmentsNotPartition);
    }
    let segments = segments_from_surfaces(&surfaces);

    let mut weights = Vec::new();
    for w in obj["weights"].as_array().ok_or(ParseError::WrongType("weights"))? {
        let n = w.as_i64().ok_or(ParseError::WrongType("weights"))?;
        let level = u8::try_from(n).ok().and_then(TermWeightLevel::new).ok_or(ParseError::InvalidWeight(n))?;
        weights.push(level);
    }
    if weights.len() != segments.len() {
        if mode == ParseMode::Strict {
            return Err(ParseError::WeightsLengthMismatch { segments: segments.len(), weights: weights.len() });
        }
        let from = weights.len();
        weights.resize(segments.len(), TermWeightLevel::LOW);
        repairs.push(if from < segments.len() {
            Repair::WeightsPadded { from, to: segments.len() }
        } else {
            Repair::WeightsTruncated { from, to: segments.len() }
        });
    }

    let labels: Vec<String> = obj["category"]
        .as_array()
        .ok_or(ParseError::WrongType("category"))?
        .iter()
        .map(|v| v.as_str().map(str::to_string).ok_or(ParseError::WrongType("category")))
        .collect::<Result<_, _>>()?;
    if labels.is_empty() {
        return Err(ParseError::EmptyCategory);
    }
    let mut seen = BTreeSet::new();
    for l in &labels {
        if !schema.taxonomy.contains(l) {
            return Err(ParseError::UnknownLabel(l.clone()));
        }
        if !seen.insert(l.as_str()) {
            return Err(ParseError::DuplicateLabel(l.clone()));
        }
    }

    let intent_desc = obj["intent_desc"].as_str().ok_or(ParseError::WrongType("intent_desc"))?.to_string();

    Ok((
        QPOutput { entities, segments, weights, category: TaxonomyLabels(labels), intent_desc },
        repairs,
    ))
}

// Storage form used inside corpus files: same layout as the canonical text,
// with every key optional so single-task examples can omit the rest.
#[derive(Serialize, Deserialize, Default)]
struct Stored {
    #[serde(default)]
    entities: Vec<(String, String, usize, usize)>,
    #[serde(default)]
    segments: Vec<String>,
    #[serde(default)]
    weights: Vec<TermWeightLevel>,
    #[serde(default)]
    category: Vec<String>,
    #[serde(default)]
    intent_desc: String,
}

impl Serialize for QPOutput {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        Stored {
            entities: self
                .entities
                .iter()
                .map(|e| (e.surface.clone(), e.etype.clone(), e.span.start, e.span.end))
                .collect(),
            segments: self.segments.iter().map(|s| s.surface.clone()).collect(),
            weights: self.weights.clone(),
            category: self.category.0.clone(),
            intent_desc: self.intent_desc.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for QPOutput {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = Stored::deserialize(deserializer)?;
        Ok(QPOutput {
            entities: s
                .entities
                .into_iter()
                .map(|(surface, etype, start, end)| EntityMention { span: Span::new(start, end), etype, surface })
                .collect(),
            segments: segments_from_surfaces(&s.segments),
            weights: s.weights,
            category: TaxonomyLabels(s.category),
            intent_desc: s.intent_desc,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Schema {
        Schema {
            ontology: Ontology::from_labels(["BRAND", "PRODUCT_SERIES"]),
            taxonomy: Taxonomy::from_labels(["Beauty", "Fashion"]),
        }
    }

    fn red_lipstick() -> QPOutput {
        QPOutput {
            entities: vec![EntityMention::new("red", "BRAND", 0, 3)],
            segments: segments_from_surfaces(&["red", " ", "lipstick"]),
            weights: vec![TermWeightLevel::CORE, TermWeightLevel::STOP, TermWeightLevel::CORE],
            category: TaxonomyLabels::new(["Beauty"]),
            intent_desc: "find lipstick".into(),
        }
    }

    #[test]
    fn fixed_key_order() {
        let text = serialize_output(&red_lipstick()).unwrap();
        assert_eq!(
            text,
            r#"{"entities":[["red","BRAND",0,3]],"segments":["red"," ","lipstick"],"weights":[3,0,3],"category":["Beauty"],"intent_desc":"find lipstick"}"#
        );
        assert_eq!(parse_output(&text, "red lipstick", &schema()).unwrap(), red_lipstick());
    }

    #[test]
    fn empty_intent_kept() {
        let mut out = red_lipstick();
        out.intent_desc.clear();
        let text = serialize_output(&out).unwrap();
        assert!(text.ends_with(r#""intent_desc":""}"#));
    }

    #[test]
    fn serialize_rejects_broken_output() {
        let mut out = red_lipstick();
        out.weights.pop();
        let err = serialize_output(&out).unwrap_err();
        assert!(matches!(err.0[0], Violation::WeightsLengthMismatch { segments: 3, weights: 2 }));
    }

    #[test]
    fn partial_segments_not_partition() {
        let text = r#"{"entities":[],"segments":["abcde"],"weights":[1],"category":["Beauty"],"intent_desc":""}"#;
        assert_eq!(parse_output(text, "abcdefg", &schema()), Err(ParseError::SegmentsNotPartition));
    }

    #[test]
    fn classified_errors() {
        let s = schema();
        let q = "ab";
        let cases: Vec<(&str, ParseError)> = vec![
            (r#"{"entities":["#, ParseError::MalformedJson(String::new())),
            (r#"{"entities":[],"segments":["ab"],"weights":[1],"category":["Beauty"]}"#, ParseError::MissingKey("intent_desc")),
            (r#"{"entities":[["ab","BRAND",0,3]],"segments":["ab"],"weights":[1],"category":["Beauty"],"intent_desc":""}"#, ParseError::SpanOutOfRange { start: 0, end: 3, len: 2 }),
            (r#"{"entities":[],"segments":["ab"],"weights":[1,2],"category":["Beauty"],"intent_desc":""}"#, ParseError::WeightsLengthMismatch { segments: 1, weights: 2 }),
            (r#"{"entities":[["ab","SHOE",0,2]],"segments":["ab"],"weights":[1],"category":["Beauty"],"intent_desc":""}"#, ParseError::UnknownLabel("SHOE".into())),
            (r#"{"entities":[],"segments":["ab"],"weights":[4],"category":["Beauty"],"intent_desc":""}"#, ParseError::InvalidWeight(4)),
            (r#"{"entities":[],"segments":["ab"],"weights":[1],"category":[],"intent_desc":""}"#, ParseError::EmptyCategory),
            (r#"{"entities":[],"segments":["ab"],"weights":[1],"category":["Beauty","Beauty"],"intent_desc":""}"#, ParseError::DuplicateLabel("Beauty".into())),
            (r#"{"entities":[],"segments":["ab"],"weights":[1],"category":["Beauty"],"intent_desc":"","x":1}"#, ParseError::UnexpectedKey("x".into())),
        ];
        for (text, want) in cases {
            let got = parse_output(text, q, &s).unwrap_err();
            assert_eq!(std::mem::discriminant(&got), std::mem::discriminant(&want), "{text}: {got:?}");
            if !matches!(want, ParseError::MalformedJson(_)) {
                assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn lenient_repairs() {
        let s = schema();
        let text = r#"{"entities":[["ab","BRAND",0,9]],"segments":["a","b"],"weights":[3],"category":["Beauty"],"intent_desc":""}"#;
        assert!(parse_output(text, "ab", &s).is_err());
        let (out, repairs) = parse_output_with(text, "ab", &s, ParseMode::Lenient).unwrap();
        assert!(out.entities.is_empty());
        assert_eq!(out.weights, vec![TermWeightLevel::CORE, TermWeightLevel::LOW]);
        assert_eq!(
            repairs,
            vec![Repair::DroppedEntity { start: 0, end: 9 }, Repair::WeightsPadded { from: 1, to: 2 }]
        );

        let text = r#"{"entities":[],"segments":["ab"],"weights":[3,2,1],"category":["Beauty"],"intent_desc":""}"#;
        let (out, repairs) = parse_output_with(text, "ab", &s, ParseMode::Lenient).unwrap();
        assert_eq!(out.weights, vec![TermWeightLevel::CORE]);
        assert_eq!(repairs, vec![Repair::WeightsTruncated { from: 3, to: 1 }]);
    }

    #[test]
    fn covered_serialization_keeps_order() {
        let out = red_lipstick();
        let cov: Coverage = [SubTask::Tw].into_iter().collect();
        assert_eq!(serialize_covered(&out, &cov), r#"{"segments":["red"," ","lipstick"],"weights":[3,0,3]}"#);
        let cov: Coverage = [SubTask::Intent, SubTask::Ner].into_iter().collect();
        assert_eq!(
            serialize_covered(&out, &cov),
            r#"{"entities":[["red","BRAND",0,3]],"intent_desc":"find lipstick"}"#
        );
    }

    #[test]
    fn stored_form_roundtrip() {
        let out = red_lipstick();
        let s = serde_json::to_string(&out).unwrap();
        assert_eq!(serde_json::from_str::<QPOutput>(&s).unwrap(), out);
        let partial: QPOutput = serde_json::from_str(r#"{"category":["Beauty"]}"#).unwrap();
        assert_eq!(partial.category.top1(), Some("Beauty"));
        assert!(partial.segments.is_empty());
    }
}
