//! Sub-task metrics. The same functions serve as per-rollout rewards.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{
    char_len, parse_output, AnnotatedExample, EntityMention, QPOutput, Schema, Span, TaxonomyLabels, TermWeightLevel,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("{spans} spans but {weights} weights")]
    LengthMismatch { spans: usize, weights: usize },
    #[error("taxonomy label list is empty")]
    EmptyLabels,
    #[error("cannot score an empty corpus")]
    EmptyCorpus,
    #[error("reward weights must be non-negative with a positive sum")]
    BadWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// True positives and the sizes of the predicted and gold unit sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub tp: usize,
    pub pred: usize,
    pub gold: usize,
}

impl Counts {
    pub fn add(self, o: Counts) -> Counts {
        Counts { tp: self.tp + o.tp, pred: self.pred + o.pred, gold: self.gold + o.gold }
    }

    /// Empty-vs-empty scores 1.0; otherwise an empty side has zero precision
    /// (or recall), and F1 is 0 whenever P + R is 0.
    pub fn prf(self) -> Prf {
        if self.pred == 0 && self.gold == 0 {
            return Prf { precision: 1.0, recall: 1.0, f1: 1.0 };
        }
        let precision = if self.pred > 0 { self.tp as f64 / self.pred as f64 } else { 0.0 };
        let recall = if self.gold > 0 { self.tp as f64 / self.gold as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Prf { precision, recall, f1 }
    }
}

fn set_counts<T: Ord>(pred: impl IntoIterator<Item = T>, gold: impl IntoIterator<Item = T>) -> Counts {
    let p: BTreeSet<T> = pred.into_iter().collect();
    let g: BTreeSet<T> = gold.into_iter().collect();
    Counts { tp: p.intersection(&g).count(), pred: p.len(), gold: g.len() }
}

pub fn seg_counts(pred: &[Span], gold: &[Span]) -> Counts {
    set_counts(pred.iter().copied(), gold.iter().copied())
}

/// Exact-span segmentation F1.
pub fn seg_f1(pred: &[Span], gold: &[Span]) -> Prf {
    seg_counts(pred, gold).prf()
}

pub fn ner_counts(pred: &[EntityMention], gold: &[EntityMention]) -> Counts {
    let key = |e: &EntityMention| (e.span.start, e.span.end, e.etype.clone());
    set_counts(pred.iter().map(key), gold.iter().map(key))
}

/// Strict NER F1: a hit needs identical start, end and type.
pub fn ner_f1_strict(pred: &[EntityMention], gold: &[EntityMention]) -> Prf {
    ner_counts(pred, gold).prf()
}

pub fn tw_counts(
    pred: (&[Span], &[TermWeightLevel]),
    gold: (&[Span], &[TermWeightLevel]),
) -> Result<Counts, MetricError> {
    for (spans, weights) in [pred, gold] {
        if spans.len() != weights.len() {
            return Err(MetricError::LengthMismatch { spans: spans.len(), weights: weights.len() });
        }
    }
    Ok(set_counts(
        pred.0.iter().copied().zip(pred.1.iter().copied()),
        gold.0.iter().copied().zip(gold.1.iter().copied()),
    ))
}

/// Joint term-weighting F1 over `<span, level>` units.
pub fn tw_joint_f1(
    pred: (&[Span], &[TermWeightLevel]),
    gold: (&[Span], &[TermWeightLevel]),
) -> Result<Prf, MetricError> {
    tw_counts(pred, gold).map(Counts::prf)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaxoScore {
    pub acc_top1: f64,
    pub f1: f64,
    pub score: f64,
}

/// Mean of top-1 accuracy and label-set F1.
pub fn taxonomy_score(pred: &TaxonomyLabels, gold: &TaxonomyLabels) -> Result<TaxoScore, MetricError> {
    if pred.is_empty() || gold.is_empty() {
        return Err(MetricError::EmptyLabels);
    }
    let acc_top1 = if pred.top1() == gold.top1() { 1.0 } else { 0.0 };
    let f1 = set_counts(pred.iter(), gold.iter()).prf().f1;
    Ok(TaxoScore { acc_top1, f1, score: (acc_top1 + f1) / 2.0 })
}

pub fn overall_of(ner_f1: f64, seg_f1: f64, tw_f1: f64, taxo_score: f64) -> f64 {
    (ner_f1 + seg_f1 + tw_f1 + taxo_score) / 4.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubTaskScores {
    pub ner_f1: f64,
    pub seg_f1: f64,
    pub tw_f1: f64,
    pub taxo_acc_top1: f64,
    pub taxo_f1: f64,
    pub taxo_score: f64,
    pub overall: f64,
}

impl SubTaskScores {
    /// Derives `taxo_score` and `overall` from the components.
    pub fn from_components(ner_f1: f64, seg_f1: f64, tw_f1: f64, taxo_acc_top1: f64, taxo_f1: f64) -> Self {
        let taxo_score = (taxo_acc_top1 + taxo_f1) / 2.0;
        Self {
            ner_f1,
            seg_f1,
            tw_f1,
            taxo_acc_top1,
            taxo_f1,
            taxo_score,
            overall: overall_of(ner_f1, seg_f1, tw_f1, taxo_score),
        }
    }

    pub fn zero() -> Self {
        Self::from_components(0.0, 0.0, 0.0, 0.0, 0.0)
    }

    /// Reward vector in [`SubTask::ALL`] order; the intent slot is filled by the caller.
    pub fn reward_vector(&self, intent: f64) -> [f64; 5] {
        [self.ner_f1, self.seg_f1, self.tw_f1, self.taxo_score, intent]
    }

    pub fn table(&self) -> String {
        let rows = [
            ("NER (F1)", self.ner_f1),
            ("Word Seg (F1)", self.seg_f1),
            ("Term Wgt (F1)", self.tw_f1),
            ("Taxonomy Acc@1", self.taxo_acc_top1),
            ("Taxonomy F1", self.taxo_f1),
            ("Taxonomy (AVG)", self.taxo_score),
            ("Overall", self.overall),
        ];
        let mut s = String::new();
        for (name, v) in rows {
            s.push_str(&format!("{name:<16} {:>7.2}\n", 100.0 * v));
        }
        s
    }
}

pub fn score_example(pred: &QPOutput, gold: &QPOutput) -> SubTaskScores {
    let ner = ner_f1_strict(&pred.entities, &gold.entities).f1;
    let seg = seg_f1(&pred.segment_spans(), &gold.segment_spans()).f1;
    let tw = tw_joint_f1((&pred.segment_spans(), &pred.weights), (&gold.segment_spans(), &gold.weights))
        .map(|p| p.f1)
        .unwrap_or(0.0);
    let taxo = taxonomy_score(&pred.category, &gold.category)
        .unwrap_or(TaxoScore { acc_top1: 0.0, f1: 0.0, score: 0.0 });
    SubTaskScores::from_components(ner, seg, tw, taxo.acc_top1, taxo.f1)
}

/// Corpus-level scores: micro-averaged span F1s, per-query mean taxonomy.
/// A `None` prediction (unparseable output) contributes no predicted units.
pub fn corpus_scores(pairs: &[(Option<&QPOutput>, &QPOutput)]) -> Result<SubTaskScores, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let empty = QPOutput::default();
    let (mut ner, mut seg, mut tw) = (Counts::default(), Counts::default(), Counts::default());
    let (mut acc_sum, mut f1_sum) = (0.0, 0.0);
    for (pred, gold) in pairs {
        let p = pred.unwrap_or(&empty);
        ner = ner.add(ner_counts(&p.entities, &gold.entities));
        let (ps, gs) = (p.segment_spans(), gold.segment_spans());
        seg = seg.add(seg_counts(&ps, &gs));
        tw = tw.add(tw_counts((&ps, &p.weights), (&gs, &gold.weights)).unwrap_or(Counts {
            tp: 0,
            pred: ps.len(),
            gold: gs.len(),
        }));
        if let Ok(t) = taxonomy_score(&p.category, &gold.category) {
            acc_sum += t.acc_top1;
            f1_sum += t.f1;
        }
    }
    let n = pairs.len() as f64;
    Ok(SubTaskScores::from_components(ner.prf().f1, seg.prf().f1, tw.prf().f1, acc_sum / n, f1_sum / n))
}

/// Per-sub-task weights of the composite reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub ner: f64,
    pub seg: f64,
    pub tw: f64,
    pub taxo: f64,
    pub intent: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { ner: 1.0, seg: 1.0, tw: 1.0, taxo: 1.0, intent: 1.0 }
    }
}

impl RewardWeights {
    pub fn as_array(&self) -> [f64; 5] {
        [self.ner, self.seg, self.tw, self.taxo, self.intent]
    }

    pub fn check(&self) -> Result<(), MetricError> {
        let w = self.as_array();
        if w.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) || w.iter().sum::<f64>() <= 0.0 {
            return Err(MetricError::BadWeights);
        }
        Ok(())
    }
}

/// Accepted intent-description length, in characters (inclusive).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntentBand {
    pub min_chars: usize,
    pub max_chars: usize,
}

impl Default for IntentBand {
    fn default() -> Self {
        Self { min_chars: 1, max_chars: 32 }
    }
}

impl IntentBand {
    pub fn reward(&self, intent: &str) -> f64 {
        let n = char_len(intent.trim());
        if n >= self.min_chars.max(1) && n <= self.max_chars {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reward {
    pub total: f64,
    /// Per-sub-task rewards in [`SubTask::ALL`] order; `None` when the rollout
    /// failed to parse. Uncovered sub-tasks hold 0.
    pub per_task: Option<[f64; 5]>,
}

/// Weighted sum of sub-task metrics for one rollout. Parse failures earn 0.
pub fn composite_reward(
    rollout_text: &str,
    gold: &AnnotatedExample,
    weights: &RewardWeights,
    schema: &Schema,
    band: &IntentBand,
) -> Reward {
    let pred = match parse_output(rollout_text, &gold.query, schema) {
        Ok(p) => p,
        Err(_) => return Reward { total: 0.0, per_task: None },
    };
    let per_task = task_rewards(&pred, gold, band);
    let total = per_task.iter().zip(weights.as_array()).map(|(r, w)| r * w).sum();
    Reward { total, per_task: Some(per_task) }
}

/// Sub-task rewards of a parsed prediction, zero for tasks `gold` does not cover.
pub fn task_rewards(pred: &QPOutput, gold: &AnnotatedExample, band: &IntentBand) -> [f64; 5] {
    let s = score_example(pred, &gold.gold);
    let all = s.reward_vector(band.reward(&pred.intent_desc));
    let mut out = [0.0; 5];
    for t in &gold.coverage {
        out[t.index()] = all[t.index()];
    }
    out
}
