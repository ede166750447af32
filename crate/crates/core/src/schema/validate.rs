use std::collections::BTreeSet;
use std::fmt;

use super::types::{char_len, char_slice, Coverage, QPOutput, Schema, Span, SubTask};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EntitySpanOutOfRange { index: usize, span: Span },
    EntitySurfaceMismatch { index: usize },
    EntityOverlap { first: usize, second: usize },
    UnknownEntityType(String),
    SegmentsNotPartition(String),
    SegmentSurfaceMismatch { index: usize },
    WeightsLengthMismatch { segments: usize, weights: usize },
    EmptyCategory,
    UnknownCategory(String),
    DuplicateLabel(String),
    /// Entity boundary falls inside a segment. Reported, but not fatal.
    EntityCrossesSegment { index: usize, span: Span },
}

impl Violation {
    pub fn is_warning(&self) -> bool {
        matches!(self, Violation::EntityCrossesSegment { .. })
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EntitySpanOutOfRange { index, span } => {
                write!(f, "entity #{index} span {span} out of range")
            }
            Violation::EntitySurfaceMismatch { index } => {
                write!(f, "entity #{index} surface differs from the query slice")
            }
            Violation::EntityOverlap { first, second } => {
                write!(f, "entities #{first} and #{second} overlap")
            }
            Violation::UnknownEntityType(t) => write!(f, "entity type `{t}` not in ontology"),
            Violation::SegmentsNotPartition(why) => write!(f, "segments do not partition the query: {why}"),
            Violation::SegmentSurfaceMismatch { index } => {
                write!(f, "segment #{index} surface differs from the query slice")
            }
            Violation::WeightsLengthMismatch { segments, weights } => {
                write!(f, "{weights} weights for {segments} segments")
            }
            Violation::EmptyCategory => f.write_str("category list is empty"),
            Violation::UnknownCategory(c) => write!(f, "category `{c}` not in taxonomy"),
            Violation::DuplicateLabel(c) => write!(f, "category `{c}` listed twice"),
            Violation::EntityCrossesSegment { index, span } => {
                write!(f, "entity #{index} span {span} crosses a segment boundary")
            }
        }
    }
}

/// All invariant violations of a full output against `query`. Empty means valid.
pub fn validate(out: &QPOutput, query: &str, schema: &Schema) -> Vec<Violation> {
    validate_covered(out, query, Some(schema), &super::types::full_coverage())
}

/// Violations restricted to the sub-tasks in `coverage`. Label membership is
/// skipped when `schema` is `None`.
pub fn validate_covered(
    out: &QPOutput,
    query: &str,
    schema: Option<&Schema>,
    coverage: &Coverage,
) -> Vec<Violation> {
    let mut v = Vec::new();
    let qlen = char_len(query);

    if coverage.contains(&SubTask::Ner) {
        for (i, e) in out.entities.iter().enumerate() {
            if !e.span.is_valid_for(qlen) {
                v.push(Violation::EntitySpanOutOfRange { index: i, span: e.span });
            } else if char_slice(query, e.span) != Some(e.surface.as_str()) {
                v.push(Violation::EntitySurfaceMismatch { index: i });
            }
            if let Some(s) = schema {
                if !s.ontology.contains(&e.etype) {
                    v.push(Violation::UnknownEntityType(e.etype.clone()));
                }
            }
        }
        for i in 0..out.entities.len() {
            for j in i + 1..out.entities.len() {
                if out.entities[i].span.overlaps(&out.entities[j].span) {
                    v.push(Violation::EntityOverlap { first: i, second: j });
                }
            }
        }
    }

    let seg_checked = coverage.contains(&SubTask::Seg) || coverage.contains(&SubTask::Tw);
    let mut partition_ok = false;
    if seg_checked {
        match partition_problem(out, query, qlen) {
            Some(p) => v.push(p),
            None => partition_ok = true,
        }
    }
    if coverage.contains(&SubTask::Tw) && out.weights.len() != out.segments.len() {
        v.push(Violation::WeightsLengthMismatch {
            segments: out.segments.len(),
            weights: out.weights.len(),
        });
    }

    if coverage.contains(&SubTask::Taxo) {
        if out.category.is_empty() {
            v.push(Violation::EmptyCategory);
        }
        let mut seen = BTreeSet::new();
        for label in out.category.iter() {
            if !seen.insert(label) {
                v.push(Violation::DuplicateLabel(label.to_string()));
            }
            if let Some(s) = schema {
                if !s.taxonomy.contains(label) {
                    v.push(Violation::UnknownCategory(label.to_string()));
                }
            }
        }
    }

    if partition_ok && coverage.contains(&SubTask::Ner) {
        let bounds: BTreeSet<usize> = out
            .segments
            .iter()
            .flat_map(|s| [s.span.start, s.span.end])
            .collect();
        for (i, e) in out.entities.iter().enumerate() {
            if e.span.is_valid_for(qlen) && !(bounds.contains(&e.span.start) && bounds.contains(&e.span.end)) {
                v.push(Violation::EntityCrossesSegment { index: i, span: e.span });
            }
        }
    }
    v
}

fn partition_problem(out: &QPOutput, query: &str, qlen: usize) -> Option<Violation> {
    let mut pos = 0;
    for (i, s) in out.segments.iter().enumerate() {
        if s.span.start != pos {
            return Some(Violation::SegmentsNotPartition(format!(
                "segment #{i} starts at {} instead of {pos}",
                s.span.start
            )));
        }
        if s.span.is_empty() {
            return Some(Violation::SegmentsNotPartition(format!("segment #{i} is empty")));
        }
        if s.span.end > qlen {
            return Some(Violation::SegmentsNotPartition(format!(
                "segment #{i} ends at {} past query length {qlen}",
                s.span.end
            )));
        }
        if char_slice(query, s.span) != Some(s.surface.as_str()) {
            return Some(Violation::SegmentSurfaceMismatch { index: i });
        }
        pos = s.span.end;
    }
    if pos != qlen {
        return Some(Violation::SegmentsNotPartition(format!(
            "segments cover [0,{pos}) of a {qlen}-char query"
        )));
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::types::*;

    fn schema() -> Schema {
        Schema {
            ontology: Ontology::from_labels(["BRAND", "PRODUCT_SERIES"]),
            taxonomy: Taxonomy::from_labels(["Beauty", "Fashion"]),
        }
    }

    fn sample() -> (String, QPOutput) {
        let q = "红色兰蔻口红".to_string();
        let out = QPOutput {
            entities: vec![EntityMention::new("兰蔻", "BRAND", 2, 4)],
            segments: segments_from_surfaces(&["红色", "兰蔻", "口红"]),
            weights: vec![TermWeightLevel::MID, TermWeightLevel::CORE, TermWeightLevel::MID],
            category: TaxonomyLabels::new(["Beauty"]),
            intent_desc: "寻求推荐".into(),
        };
        (q, out)
    }

    #[test]
    fn valid_output_has_no_violations() {
        let (q, out) = sample();
        assert_eq!(validate(&out, &q, &schema()), vec![]);
    }

    #[test]
    fn duplicate_label() {
        let (q, mut out) = sample();
        out.category = TaxonomyLabels::new(["Beauty", "Beauty"]);
        assert_eq!(validate(&out, &q, &schema()), vec![Violation::DuplicateLabel("Beauty".into())]);
    }

    #[test]
    fn entity_crossing_segment_is_a_warning() {
        let (q, mut out) = sample();
        out.entities = vec![EntityMention::new("色兰蔻口", "BRAND", 1, 5)];
        let v = validate(&out, &q, &schema());
        assert_eq!(v, vec![Violation::EntityCrossesSegment { index: 0, span: Span::new(1, 5) }]);
        assert!(v[0].is_warning());
    }

    #[test]
    fn partial_partition_detected() {
        let (q, mut out) = sample();
        out.segments.pop();
        out.weights.pop();
        let v = validate(&out, &q, &schema());
        assert!(matches!(v[0], Violation::SegmentsNotPartition(_)), "{v:?}");
    }

    #[test]
    fn coverage_limits_checks() {
        let (q, out) = sample();
        let ner_only = QPOutput { entities: out.entities.clone(), ..Default::default() };
        let cov: Coverage = [SubTask::Ner].into_iter().collect();
        assert!(validate_covered(&ner_only, &q, Some(&schema()), &cov).is_empty());
        assert!(!validate(&ner_only, &q, &schema()).is_empty());
    }

    #[test]
    fn overlap_and_unknowns() {
        let (q, mut out) = sample();
        out.entities.push(EntityMention::new("蔻口", "WIDGET", 3, 5));
        out.category = TaxonomyLabels::new(["Toys"]);
        let v = validate(&out, &q, &schema());
        assert!(v.contains(&Violation::UnknownEntityType("WIDGET".into())));
        assert!(v.contains(&Violation::EntityOverlap { first: 0, second: 1 }));
        assert!(v.contains(&Violation::UnknownCategory("Toys".into())));
    }
}
