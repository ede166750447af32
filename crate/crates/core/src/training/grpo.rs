use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{GrpoConfig, StepLog, TaskEnv, TrainError};
use crate::metrics::composite_reward;
use crate::policy::{exact_kl, log_softmax, sum_grads, Adam, Policy, PolicyError, Rollout, Weights};
use crate::rng;
use crate::schema::{AnnotatedExample, Coverage, SubTask};

/// G rollouts for one prompt with their rewards and normalized advantages.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupRollout {
    pub example_id: u64,
    pub rollouts: Vec<Rollout>,
    pub rewards: Vec<f64>,
    /// Per-sub-task rewards; all zero for rollouts that failed to parse.
    pub per_task: Vec<[f64; 5]>,
    pub parsed: Vec<bool>,
    pub advantages: Vec<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Group-normalized advantages (R - mean) / (std + eps) with the population
/// std. A group whose rewards are all equal gets zero advantages.
pub fn advantages(rewards: &[f64], eps: f64) -> Vec<f64> {
    if rewards.is_empty() {
        return vec![];
    }
    let all_equal = rewards.iter().all(|r| *r == rewards[0]);
    if all_equal {
        return vec![0.0; rewards.len()];
    }
    let (mean, std) = mean_std(rewards);
    rewards.iter().map(|r| (r - mean) / (std + eps)).collect()
}

/// Population std of each sub-task's reward across the group.
pub fn group_stds(per_task: &[[f64; 5]]) -> [f64; 5] {
    let mut out = [0.0; 5];
    if per_task.is_empty() {
        return out;
    }
    for (k, o) in out.iter_mut().enumerate() {
        let col: Vec<f64> = per_task.iter().map(|r| r[k]).collect();
        *o = mean_std(&col).1;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterOutcome {
    /// Divergent on the tagged sub-task, consistent on every other one.
    Retain(SubTask),
    NoDivergence,
    MultipleDivergent(Vec<SubTask>),
    /// Some non-divergent sub-task is above the consistency threshold.
    Inconsistent(Vec<SubTask>),
}

/// Reward-attribution rule on one group's per-sub-task reward stds.
pub fn filter_decision(stds: &[f64; 5], covered: &Coverage, tau_div: f64, tau_cons: f64, relaxed: bool) -> FilterOutcome {
    let div: Vec<SubTask> = covered.iter().copied().filter(|t| stds[t.index()] > tau_div).collect();
    let noisy: Vec<SubTask> =
        covered.iter().copied().filter(|t| !div.contains(t) && stds[t.index()] > tau_cons).collect();
    if div.is_empty() {
        return FilterOutcome::NoDivergence;
    }
    if !noisy.is_empty() {
        return FilterOutcome::Inconsistent(noisy);
    }
    if div.len() > 1 && !relaxed {
        return FilterOutcome::MultipleDivergent(div);
    }
    let mut best = div[0];
    for t in &div[1..] {
        if stds[t.index()] > stds[best.index()] {
            best = *t;
        }
    }
    FilterOutcome::Retain(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retained {
    /// Index into the examined slice.
    pub index: usize,
    pub example_id: u64,
    pub target: SubTask,
    pub stds: [f64; 5],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub examined: usize,
    pub retained: usize,
    pub per_task: [usize; 5],
    pub no_divergence: usize,
    pub multiple_divergent: usize,
    pub inconsistent: usize,
}

pub(crate) fn rollout_group(
    policy: &Policy,
    ex: &AnnotatedExample,
    env: &TaskEnv,
    group_size: usize,
    temperature: f64,
    eps_adv: f64,
    seed: u64,
    purpose: &str,
    key: &[u64],
) -> Result<GroupRollout, TrainError> {
    let prompt = env.prompt_ids(ex, &policy.vocab)?;
    let mut rngs: Vec<rng::Rng> = (0..group_size as u64)
        .map(|i| rng::stream(seed, purpose, &[key, &[ex.id, i]].concat()))
        .collect();
    let rollouts = policy.sample_group(&prompt, temperature, env.max_gen_len, &mut rngs)?;
    let mut rewards = Vec::with_capacity(group_size);
    let mut per_task = Vec::with_capacity(group_size);
    let mut parsed = Vec::with_capacity(group_size);
    for r in &rollouts {
        let rw = composite_reward(&r.text, ex, &env.weights, &env.schema, &env.band);
        rewards.push(rw.total);
        parsed.push(rw.per_task.is_some());
        per_task.push(rw.per_task.unwrap_or([0.0; 5]));
    }
    let advantages = advantages(&rewards, eps_adv);
    Ok(GroupRollout { example_id: ex.id, rollouts, rewards, per_task, parsed, advantages })
}

/// Keeps the examples whose G sampled rollouts diverge in reward on exactly
/// one sub-task (or at least one, when relaxed) while agreeing on the rest.
pub fn grpo_filter(
    examples: &[AnnotatedExample],
    policy: &Policy,
    env: &TaskEnv,
    cfg: &GrpoConfig,
    seed: u64,
) -> Result<(Vec<Retained>, FilterReport), TrainError> {
    let outcomes: Vec<(FilterOutcome, [f64; 5])> = examples
        .par_iter()
        .map(|ex| {
            let g = rollout_group(policy, ex, env, cfg.group_size, cfg.temperature, cfg.eps_adv, seed, "grpo-filter", &[])?;
            let stds = group_stds(&g.per_task);
            Ok((filter_decision(&stds, &ex.coverage, cfg.tau_div, cfg.tau_cons, cfg.relaxed_filter), stds))
        })
        .collect::<Result<_, TrainError>>()?;
    let mut report = FilterReport { examined: examples.len(), ..Default::default() };
    let mut kept = Vec::new();
    for (i, (o, stds)) in outcomes.into_iter().enumerate() {
        match o {
            FilterOutcome::Retain(t) => {
                report.retained += 1;
                report.per_task[t.index()] += 1;
                kept.push(Retained { index: i, example_id: examples[i].id, target: t, stds });
            }
            FilterOutcome::NoDivergence => report.no_divergence += 1,
            FilterOutcome::MultipleDivergent(_) => report.multiple_divergent += 1,
            FilterOutcome::Inconsistent(_) => report.inconsistent += 1,
        }
    }
    Ok((kept, report))
}

/// One on-policy update: sample a group per prompt, then ascend
/// mean_i [ (1/|y_i|) sum_t (log pi(y_it) * A_i - beta * KL_t(pi || ref)) ]
/// averaged over prompts.
#[allow(clippy::too_many_arguments)]
pub fn grpo_step(
    policy: &mut Policy,
    reference: &Policy,
    batch: &[&AnnotatedExample],
    env: &TaskEnv,
    cfg: &GrpoConfig,
    opt: &mut Adam,
    seed: u64,
    step: usize,
) -> Result<(StepLog, Vec<GroupRollout>), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Data("empty GRPO batch".into()));
    }
    let groups: Vec<GroupRollout> = batch
        .par_iter()
        .map(|ex| {
            rollout_group(policy, ex, env, cfg.group_size, cfg.temperature, cfg.eps_adv, seed, "grpo-rollout", &[step as u64])
        })
        .collect::<Result<_, _>>()?;

    let (loss, kl, norm) = update_from_groups(policy, reference, &groups, cfg.beta, opt)?;
    if !policy.w.is_finite() {
        return Err(TrainError::Policy(PolicyError::NonFinite(format!("stage3 parameters at step {step}"))));
    }
    let n_roll = groups.iter().map(|g| g.rollouts.len()).sum::<usize>() as f64;
    let mean_reward = groups.iter().flat_map(|g| &g.rewards).sum::<f64>() / n_roll;
    let mut per_task = [0.0; 5];
    for row in groups.iter().flat_map(|g| &g.per_task) {
        for k in 0..5 {
            per_task[k] += row[k] / n_roll;
        }
    }
    let log = StepLog {
        stage: "stage3".into(),
        step,
        loss,
        unified_loss: None,
        aux_loss: None,
        mean_reward: Some(mean_reward),
        per_task: Some(per_task),
        kl: Some(kl),
        grad_norm: norm,
    };
    Ok((log, groups))
}

/// Gradient step on already-sampled groups. Returns (loss, mean per-token
/// KL to the reference, pre-clip gradient norm). No update happens when
/// every advantage is zero and `beta` is zero.
pub fn update_from_groups(
    policy: &mut Policy,
    reference: &Policy,
    groups: &[GroupRollout],
    beta: f64,
    opt: &mut Adam,
) -> Result<(f64, f64, f64), TrainError> {
    let jobs: Vec<(&Rollout, f64)> =
        groups.iter().flat_map(|g| g.rollouts.iter().zip(g.advantages.iter().copied())).collect();
    if jobs.is_empty() {
        return Ok((0.0, 0.0, 0.0));
    }
    let n_roll = jobs.len() as f64;
    let frozen: &Policy = policy;
    let parts: Vec<(f64, f64, Option<Weights>)> = jobs
        .par_iter()
        .map(|(r, adv)| {
            if r.gen_ids.is_empty() {
                return Ok((0.0, 0.0, None));
            }
            let c = 1.0 / (n_roll * r.gen_ids.len() as f64);
            let ref_logits = reference.logits(&r.prompt_ids, &r.gen_ids)?;
            let mut kl_mean = 0.0;
            let (loss, g) = frozen.loss_and_grad(&r.prompt_ids, &r.gen_ids, |l| {
                let lp = log_softmax(l);
                let (kl, gk) = exact_kl(l, ref_logits.view());
                kl_mean = kl.iter().sum::<f64>() / kl.len() as f64;
                let mut dl = lp.mapv(f64::exp) * (adv * c);
                let mut loss = 0.0;
                for (t, &y) in r.gen_ids.iter().enumerate() {
                    dl[[t, y as usize]] -= adv * c;
                    loss -= adv * c * lp[[t, y as usize]];
                }
                loss += beta * c * kl.iter().sum::<f64>();
                (loss, dl + gk * (beta * c))
            })?;
            if !kl_mean.is_finite() || kl_mean < -1e-9 {
                return Err(TrainError::Policy(PolicyError::NonFinite(format!("KL {kl_mean}"))));
            }
            let skip = *adv == 0.0 && beta == 0.0;
            Ok((loss, kl_mean, (!skip).then_some(g)))
        })
        .collect::<Result<_, TrainError>>()?;
    let loss: f64 = parts.iter().map(|p| p.0).sum();
    let kl = parts.iter().map(|p| p.1).sum::<f64>() / n_roll;
    let norm = match sum_grads(parts.into_iter().filter_map(|p| p.2)) {
        Some(g) => opt.step(&mut policy.w, &g),
        None => 0.0,
    };
    Ok((loss, kl, norm))
}

/// Iterates GRPO over shuffled batches of `data`. `on_step` sees every
/// step's log and groups (for logging and periodic checkpoints).
pub fn train_stage3(
    policy: &mut Policy,
    reference: &Policy,
    data: &[&AnnotatedExample],
    env: &TaskEnv,
    cfg: &GrpoConfig,
    seed: u64,
    mut on_step: impl FnMut(&StepLog, &[GroupRollout], &Policy) -> Result<(), TrainError>,
) -> Result<Vec<StepLog>, TrainError> {
    let mut logs = Vec::with_capacity(cfg.steps);
    if data.is_empty() || cfg.steps == 0 {
        if data.is_empty() && cfg.steps > 0 {
            log::warn!("stage 3 has no filtered examples; policy left unchanged");
        }
        return Ok(logs);
    }
    let mut opt = Adam::new(cfg.adam, policy.w.n_params());
    for step in 0..cfg.steps {
        let mut r = rng::stream(seed, "grpo-batch", &[step as u64]);
        let k = cfg.batch_size.min(data.len());
        let batch: Vec<&AnnotatedExample> = index::sample(&mut r, data.len(), k).into_iter().map(|i| data[i]).collect();
        let (log, groups) = grpo_step(policy, reference, &batch, env, cfg, &mut opt, seed, step)?;
        if log.kl.is_some_and(|kl| kl > cfg.kl_warn) {
            log::warn!("stage 3 step {step}: KL to reference {:.3} exceeds {}", log.kl.unwrap(), cfg.kl_warn);
        }
        on_step(&log, &groups, policy)?;
        logs.push(log);
    }
    Ok(logs)
}
