//! Three-stage alignment: mixed SFT over unified and auxiliary data, target
//! SFT on unified data, then group-relative policy optimization with a
//! reward-attribution data filter.

mod eval;
mod grpo;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{IntentBand, RewardWeights};
use crate::policy::{nll_loss, sum_grads, Adam, AdamConfig, Policy, PolicyError, Vocab};
use crate::prompt::{compose_prompt, compose_query_prompt, PromptConfig, PromptError};
use crate::rng;
use crate::schema::{serialize_covered, AnnotatedExample, Schema};

pub use eval::{expected_reward, greedy_outputs, score_outputs, GreedyOutput};
pub use grpo::{
    advantages, filter_decision, group_stds, grpo_filter, grpo_step, train_stage3, update_from_groups, FilterOutcome, FilterReport,
    GroupRollout, Retained,
};

use rand::Rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training data: {0}")]
    Data(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Examples per auxiliary sub-task per step (stage 1 only).
    pub aux_batch_size: usize,
    pub adam: AdamConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub beta: f64,
    pub eps_adv: f64,
    pub temperature: f64,
    pub steps: usize,
    /// Prompts per update.
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub tau_div: f64,
    pub tau_cons: f64,
    /// Accept examples divergent on at least one sub-task instead of exactly one.
    pub relaxed_filter: bool,
    /// Mean per-token KL above which a warning is logged.
    pub kl_warn: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub stage1: SftConfig,
    pub stage2: SftConfig,
    pub grpo: GrpoConfig,
    pub weights: RewardWeights,
    pub band: IntentBand,
    pub max_gen_len: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self { steps: 1000, batch_size: 16, aux_batch_size: 2, adam: AdamConfig { lr: 3e-3, ..Default::default() } }
    }
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            beta: 0.02,
            eps_adv: 1e-8,
            temperature: 1.0,
            steps: 200,
            batch_size: 8,
            adam: AdamConfig { lr: 1e-4, ..Default::default() },
            tau_div: 0.15,
            tau_cons: 0.05,
            relaxed_filter: false,
            kl_warn: 5.0,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            stage1: SftConfig::default(),
            stage2: SftConfig { steps: 1500, aux_batch_size: 0, ..Default::default() },
            grpo: GrpoConfig::default(),
            weights: RewardWeights::default(),
            band: IntentBand::default(),
            max_gen_len: 160,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lambda >= 0.0) {
            return bad("lambda must be >= 0");
        }
        let g = &self.grpo;
        if g.group_size < 2 {
            return bad("group size must be >= 2");
        }
        if !(g.beta >= 0.0) {
            return bad("beta must be >= 0");
        }
        if !(g.tau_div > g.tau_cons && g.tau_cons >= 0.0) {
            return bad("filter thresholds need tau_div > tau_cons >= 0");
        }
        if !(g.temperature > 0.0) || !(g.eps_adv > 0.0) {
            return bad("temperature and eps_adv must be positive");
        }
        if self.stage1.batch_size == 0 || self.stage2.batch_size == 0 || g.batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        if self.max_gen_len == 0 {
            return bad("max_gen_len must be positive");
        }
        self.weights.check().map_err(|e| TrainError::Config(e.to_string()))
    }
}

/// What the policy sees and how outputs are judged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEnv {
    pub prompt: PromptConfig,
    pub schema: Schema,
    pub weights: RewardWeights,
    pub band: IntentBand,
    pub max_gen_len: usize,
}

/// A tokenized supervised pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub id: u64,
    pub prompt: Vec<u32>,
    pub target: Vec<u32>,
}

impl TaskEnv {
    fn units<'a>(&'a self, vocab: &'a Vocab) -> impl Fn(&str) -> usize + 'a {
        // +1 for BOS
        move |s: &str| vocab.token_len(s) + 1
    }

    /// Full prompt for unified examples, query-only prompt otherwise.
    pub fn prompt_text(&self, ex: &AnnotatedExample, vocab: &Vocab) -> Result<String, PromptError> {
        if ex.is_unified() {
            compose_prompt(ex, &self.prompt, self.units(vocab))
        } else {
            compose_query_prompt(&ex.query, &self.prompt, self.units(vocab))
        }
    }

    pub fn prompt_ids(&self, ex: &AnnotatedExample, vocab: &Vocab) -> Result<Vec<u32>, PromptError> {
        Ok(vocab.encode_prompt(&self.prompt_text(ex, vocab)?))
    }

    pub fn encode(&self, ex: &AnnotatedExample, vocab: &Vocab) -> Result<Encoded, TrainError> {
        let target = vocab.encode_target(&serialize_covered(&ex.gold, &ex.coverage));
        Ok(Encoded { id: ex.id, prompt: self.prompt_ids(ex, vocab)?, target })
    }

    pub fn encode_all(&self, data: &[AnnotatedExample], vocab: &Vocab) -> Result<Vec<Encoded>, TrainError> {
        data.par_iter().map(|ex| self.encode(ex, vocab)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub stage: String,
    pub step: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unified_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aux_loss: Option<[f64; 5]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_reward: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_task: Option<[f64; 5]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
    pub grad_norm: f64,
}

impl StepLog {
    fn sft(stage: &str, step: usize, loss: f64, unified: f64, aux: Option<[f64; 5]>, grad_norm: f64) -> Self {
        Self {
            stage: stage.into(),
            step,
            loss,
            unified_loss: Some(unified),
            aux_loss: aux,
            mean_reward: None,
            per_task: None,
            kl: None,
            grad_norm,
        }
    }
}

fn draw(n: usize, k: usize, seed: u64, purpose: &str, ids: &[u64]) -> Vec<usize> {
    let mut r = rng::stream(seed, purpose, ids);
    (0..k).map(|_| r.gen_range(0..n)).collect()
}

/// Weighted token-mean NLL over a batch: returns (Σ w·loss, Σ w·grad) with
/// a fixed summation order.
fn batch_nll(policy: &Policy, items: &[(&Encoded, f64)]) -> Result<Option<(f64, crate::policy::Weights)>, TrainError> {
    let parts: Vec<(f64, crate::policy::Weights)> = items
        .par_iter()
        .map(|(e, w)| policy.loss_and_grad(&e.prompt, &e.target, |l| nll_loss(l, &e.target, *w)))
        .collect::<Result<_, _>>()?;
    let loss = parts.iter().map(|p| p.0).sum();
    Ok(sum_grads(parts.into_iter().map(|p| p.1)).map(|g| (loss, g)))
}

/// Mixed SFT: mean unified NLL + lambda * sum over sub-tasks of mean
/// auxiliary NLL. Unified batches are drawn from the same keyed stream as
/// stage 2, so lambda = 0 reproduces stage 2 exactly.
pub fn stage1_mixed_sft(
    policy: &mut Policy,
    unified: &[Encoded],
    aux: &[Vec<Encoded>; 5],
    lambda: f64,
    cfg: &SftConfig,
    seed: u64,
) -> Result<Vec<StepLog>, TrainError> {
    run_sft("stage1", policy, unified, aux, lambda, cfg, seed)
}

/// Target SFT on unified data only.
pub fn stage2_sft(policy: &mut Policy, unified: &[Encoded], cfg: &SftConfig, seed: u64) -> Result<Vec<StepLog>, TrainError> {
    run_sft("stage2", policy, unified, &Default::default(), 0.0, cfg, seed)
}

/// One mixed-SFT objective evaluation: (total, unified, per-task aux) losses
/// and the gradient. Exposed for equivalence checks.
pub fn sft_objective(
    policy: &Policy,
    unified: &[&Encoded],
    aux: &[Vec<&Encoded>; 5],
    lambda: f64,
) -> Result<(f64, f64, [f64; 5], crate::policy::Weights), TrainError> {
    if unified.is_empty() {
        return Err(TrainError::Data("empty unified batch".into()));
    }
    let bu = unified.len() as f64;
    let items: Vec<(&Encoded, f64)> = unified.iter().map(|e| (*e, 1.0 / bu)).collect();
    let (lu, mut g) = batch_nll(policy, &items)?.expect("non-empty");
    let mut aux_loss = [0.0; 5];
    let mut total = lu;
    if lambda > 0.0 {
        for (k, batch) in aux.iter().enumerate() {
            if batch.is_empty() {
                continue;
            }
            let w = 1.0 / batch.len() as f64;
            let items: Vec<(&Encoded, f64)> = batch.iter().map(|e| (*e, w)).collect();
            let (l, mut gk) = batch_nll(policy, &items)?.expect("non-empty");
            aux_loss[k] = l;
            total += lambda * l;
            gk.scale(lambda);
            g.add_assign(&gk);
        }
    }
    Ok((total, lu, aux_loss, g))
}

fn run_sft(
    stage: &str,
    policy: &mut Policy,
    unified: &[Encoded],
    aux: &[Vec<Encoded>; 5],
    lambda: f64,
    cfg: &SftConfig,
    seed: u64,
) -> Result<Vec<StepLog>, TrainError> {
    if unified.is_empty() {
        return Err(TrainError::Data("empty unified dataset".into()));
    }
    if !(lambda >= 0.0) {
        return Err(TrainError::Config("lambda must be >= 0".into()));
    }
    let mut opt = Adam::new(cfg.adam, policy.w.n_params());
    let mut logs = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let ub: Vec<&Encoded> =
            draw(unified.len(), cfg.batch_size, seed, "sft-unified", &[step as u64]).into_iter().map(|i| &unified[i]).collect();
        let mut ab: [Vec<&Encoded>; 5] = Default::default();
        if lambda > 0.0 {
            for (k, set) in aux.iter().enumerate() {
                if !set.is_empty() {
                    ab[k] = draw(set.len(), cfg.aux_batch_size, seed, "sft-aux", &[step as u64, k as u64])
                        .into_iter()
                        .map(|i| &set[i])
                        .collect();
                }
            }
        }
        let (total, lu, la, g) = sft_objective(policy, &ub, &ab, lambda)?;
        let norm = opt.step(&mut policy.w, &g);
        if !policy.w.is_finite() {
            return Err(TrainError::Policy(PolicyError::NonFinite(format!("{stage} parameters at step {step}"))));
        }
        logs.push(StepLog::sft(stage, step, total, lu, (lambda > 0.0).then_some(la), norm));
    }
    Ok(logs)
}

/// Groups single-task examples by their covered sub-task.
pub fn group_by_task(aux: &[AnnotatedExample]) -> [Vec<&AnnotatedExample>; 5] {
    let mut out: [Vec<&AnnotatedExample>; 5] = Default::default();
    for e in aux {
        if let (1, Some(t)) = (e.coverage.len(), e.coverage.iter().next()) {
            out[t.index()].push(e);
        }
    }
    out
}

#[cfg(test)]
mod tests;
