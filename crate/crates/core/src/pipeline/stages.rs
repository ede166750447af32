use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{build_vocab, hash_tree, read_jsonl, schema_for, write_json, write_jsonl, Config, Layout, RunManifest};
use crate::legacy::{generate_corpus, noise_rates, pseudo_label_all, Corpus, LegacyConfig, LegacyPipeline};
use crate::metrics::SubTaskScores;
use crate::policy::{Policy, Vocab};
use crate::rng;
use crate::schema::{AnnotatedExample, QPOutput, Schema, SubTask};
use crate::serving::{precompute, write_snapshot, PrecomputeReport};
use crate::training::{
    expected_reward, greedy_outputs, grpo_filter, group_by_task, score_outputs, stage1_mixed_sft, stage2_sft,
    Encoded, FilterReport, Retained, StepLog, TaskEnv, TrainError,
};

/// Broad failure class; the CLI maps it to an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Training,
    Serving,
}

#[derive(Debug, Error)]
#[error("stage `{stage}` failed: {msg}")]
pub struct PipelineError {
    pub stage: &'static str,
    pub kind: ErrorKind,
    pub msg: String,
}

fn fail(stage: &'static str, kind: ErrorKind) -> impl Fn(String) -> PipelineError {
    move |msg| PipelineError { stage, kind, msg }
}

fn train_err(stage: &'static str) -> impl Fn(TrainError) -> PipelineError {
    move |e| {
        let kind = match e {
            TrainError::Config(_) => ErrorKind::Config,
            TrainError::Data(_) | TrainError::Prompt(_) => ErrorKind::Data,
            TrainError::Policy(_) => ErrorKind::Training,
        };
        PipelineError { stage, kind, msg: e.to_string() }
    }
}

fn io_err(stage: &'static str) -> impl Fn(std::io::Error) -> PipelineError {
    move |e| PipelineError { stage, kind: ErrorKind::Data, msg: e.to_string() }
}

pub fn schema_of(cfg: &Config) -> Schema {
    schema_for(&cfg.profile, &cfg.legacy.fallback_category)
}

pub fn task_env(cfg: &Config) -> TaskEnv {
    TaskEnv {
        prompt: cfg.prompt.clone(),
        schema: schema_of(cfg),
        weights: cfg.train.weights,
        band: cfg.train.band,
        max_gen_len: cfg.train.max_gen_len,
    }
}

pub fn legacy_pipeline(cfg: &Config) -> Result<LegacyPipeline, String> {
    let mut lc = LegacyConfig::from_profile(&cfg.profile, &cfg.legacy.fallback_category);
    lc.noise.rate = cfg.legacy.noise_rate;
    LegacyPipeline::new(lc)
}

pub fn load_split(lay: &Layout, split: &str, stage: &'static str) -> Result<Vec<AnnotatedExample>, PipelineError> {
    read_jsonl(&lay.corpus(split)).map_err(fail(stage, ErrorKind::Data))
}

pub fn load_checkpoint(lay: &Layout, name: &str, stage: &'static str) -> Result<Policy, PipelineError> {
    Policy::load(&lay.checkpoint(name)).map_err(|e| PipelineError { stage, kind: ErrorKind::Data, msg: e.to_string() })
}

pub fn gen_data(cfg: &Config, lay: &Layout) -> Result<Corpus, PipelineError> {
    let st = "gen-data";
    let corpus = generate_corpus(cfg.seed, cfg.corpus, &cfg.profile, &cfg.instruction, &cfg.rules)
        .map_err(|e| fail(st, ErrorKind::Data)(e.to_string()))?;
    for (name, split) in [("unified", &corpus.unified), ("qlog", &corpus.qlog), ("golden", &corpus.golden), ("pool", &corpus.pool)] {
        write_jsonl(&lay.corpus(name), split).map_err(io_err(st))?;
    }
    Ok(corpus)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelReport {
    pub queries: usize,
    pub examples: usize,
    /// Fraction of pseudo-labels disagreeing with hidden gold, per sub-task.
    pub noise: BTreeMap<String, f64>,
}

pub fn pseudo_label(cfg: &Config, lay: &Layout) -> Result<(Vec<AnnotatedExample>, PseudoLabelReport), PipelineError> {
    let st = "pseudo-label";
    let qlog = load_split(lay, "qlog", st)?;
    let legacy = legacy_pipeline(cfg).map_err(fail(st, ErrorKind::Config))?;
    let aux = pseudo_label_all(&legacy, &qlog, cfg.seed);
    let rates = noise_rates(&aux, &qlog);
    let report = PseudoLabelReport {
        queries: qlog.len(),
        examples: aux.len(),
        noise: SubTask::ALL.iter().map(|t| (t.name().to_string(), rates[t.index()])).collect(),
    };
    write_jsonl(&lay.aux(), &aux).map_err(io_err(st))?;
    write_json(&lay.report("pseudo_label"), &report).map_err(io_err(st))?;
    Ok((aux, report))
}

/// Vocabulary from the configured specials, the corpus profile and every
/// unified and pool text.
pub fn prepare_vocab(cfg: &Config, lay: &Layout) -> Result<Vocab, PipelineError> {
    let st = "vocab";
    let unified = load_split(lay, "unified", st)?;
    let pool = load_split(lay, "pool", st)?;
    let refs: Vec<&AnnotatedExample> = unified.iter().chain(&pool).collect();
    let vocab = build_vocab(cfg, &schema_of(cfg), &refs);
    write_json(&lay.vocab(), &vocab).map_err(io_err(st))?;
    Ok(vocab)
}

fn save_stage(lay: &Layout, name: &str, st: &'static str, policy: &Policy, logs: &[StepLog]) -> Result<(), PipelineError> {
    policy.save(&lay.checkpoint(name)).map_err(|e| fail(st, ErrorKind::Training)(e.to_string()))?;
    write_jsonl(&lay.train_log(name), logs).map_err(io_err(st))
}

pub fn train_stage1(cfg: &Config, lay: &Layout) -> Result<Vec<StepLog>, PipelineError> {
    let st = "train stage1";
    let vocab = prepare_vocab(cfg, lay)?;
    let env = task_env(cfg);
    let unified = load_split(lay, "unified", st)?;
    let aux: Vec<AnnotatedExample> = if cfg.train.lambda > 0.0 && cfg.train.stage1.aux_batch_size > 0 {
        read_jsonl(&lay.aux()).map_err(fail(st, ErrorKind::Data))?
    } else {
        Vec::new()
    };
    let enc_u = env.encode_all(&unified, &vocab).map_err(train_err(st))?;
    let groups = group_by_task(&aux);
    let mut enc_aux: [Vec<Encoded>; 5] = Default::default();
    for (k, g) in groups.iter().enumerate() {
        let owned: Vec<AnnotatedExample> = g.iter().map(|e| (*e).clone()).collect();
        enc_aux[k] = env.encode_all(&owned, &vocab).map_err(train_err(st))?;
    }
    let mut policy = Policy::new(cfg.policy.clone(), vocab, &mut rng::stream(cfg.seed, "policy-init", &[]))
        .map_err(|e| fail(st, ErrorKind::Config)(e.to_string()))?;
    let logs = stage1_mixed_sft(&mut policy, &enc_u, &enc_aux, cfg.train.lambda, &cfg.train.stage1, cfg.seed)
        .map_err(train_err(st))?;
    save_stage(lay, "stage1", st, &policy, &logs)?;
    Ok(logs)
}

pub fn train_stage2(cfg: &Config, lay: &Layout) -> Result<Vec<StepLog>, PipelineError> {
    let st = "train stage2";
    let mut policy = load_checkpoint(lay, "stage1", st)?;
    let env = task_env(cfg);
    let unified = load_split(lay, "unified", st)?;
    let enc = env.encode_all(&unified, &policy.vocab).map_err(train_err(st))?;
    let logs = stage2_sft(&mut policy, &enc, &cfg.train.stage2, cfg.seed.wrapping_add(2)).map_err(train_err(st))?;
    save_stage(lay, "stage2", st, &policy, &logs)?;
    Ok(logs)
}

pub fn filter(cfg: &Config, lay: &Layout) -> Result<(Vec<Retained>, FilterReport), PipelineError> {
    let st = "filter";
    let policy = load_checkpoint(lay, "stage2", st)?;
    let pool = load_split(lay, "pool", st)?;
    let (kept, report) = grpo_filter(&pool, &policy, &task_env(cfg), &cfg.train.grpo, cfg.seed).map_err(train_err(st))?;
    write_jsonl(&lay.grpo_data(), &kept).map_err(io_err(st))?;
    write_json(&lay.report("filter"), &report).map_err(io_err(st))?;
    Ok((kept, report))
}

pub fn train_stage3(cfg: &Config, lay: &Layout) -> Result<Vec<StepLog>, PipelineError> {
    let st = "train stage3";
    let reference = load_checkpoint(lay, "stage2", st)?;
    let pool = load_split(lay, "pool", st)?;
    let kept: Vec<Retained> = read_jsonl(&lay.grpo_data()).map_err(fail(st, ErrorKind::Data))?;
    let by_id: HashMap<u64, &AnnotatedExample> = pool.iter().map(|e| (e.id, e)).collect();
    let data: Vec<&AnnotatedExample> = kept
        .iter()
        .map(|r| by_id.get(&r.example_id).copied().ok_or_else(|| fail(st, ErrorKind::Data)(format!("unknown example {}", r.example_id))))
        .collect::<Result<_, _>>()?;
    let mut policy = reference.clone();
    let env = task_env(cfg);
    let logs = crate::training::train_stage3(&mut policy, &reference, &data, &env, &cfg.train.grpo, cfg.seed.wrapping_add(3), |_, _, _| Ok(()))
        .map_err(train_err(st))?;
    save_stage(lay, "stage3", st, &policy, &logs)?;
    Ok(logs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemEval {
    pub scores: SubTaskScores,
    /// Fraction of golden examples whose output strictly parsed.
    pub parse_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldoutReport {
    pub filter: FilterReport,
    pub samples_per_example: usize,
    pub stage2_reward: f64,
    pub stage3_reward: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub systems: BTreeMap<String, SystemEval>,
    pub heldout: HeldoutReport,
    /// Held-out Overall is non-decreasing across stages 1, 2, 3.
    pub monotone: bool,
    /// Stage-3 reward on the filtered held-out slice beats stage 2 by the margin.
    pub reward_gain_ok: bool,
    pub legacy_below_stage3: bool,
}

pub const REWARD_MARGIN: f64 = 0.01;

fn eval_policy(policy: &Policy, golden: &[AnnotatedExample], env: &TaskEnv) -> Result<SystemEval, TrainError> {
    let outs = greedy_outputs(policy, golden, env)?;
    let scores = score_outputs(&outs, golden).map_err(|e| TrainError::Data(e.to_string()))?;
    let parsed = outs.iter().filter(|o| o.parsed.is_some()).count();
    Ok(SystemEval { scores, parse_rate: parsed as f64 / golden.len().max(1) as f64 })
}

pub fn eval_legacy(legacy: &LegacyPipeline, golden: &[AnnotatedExample]) -> Result<SystemEval, String> {
    let preds: Vec<QPOutput> = golden.iter().map(|g| legacy.run(&g.query)).collect();
    let pairs: Vec<(Option<&QPOutput>, &QPOutput)> = preds.iter().zip(golden).map(|(p, g)| (Some(p), &g.gold)).collect();
    let scores = crate::metrics::corpus_scores(&pairs).map_err(|e| e.to_string())?;
    Ok(SystemEval { scores, parse_rate: 1.0 })
}

/// Greedy golden-set scores for every stage and the legacy pipeline, plus
/// the stage-2 vs stage-3 expected reward on the golden examples the filter
/// retains under the stage-2 policy.
pub fn evaluate(cfg: &Config, lay: &Layout) -> Result<EvalSummary, PipelineError> {
    let st = "eval";
    let golden = load_split(lay, "golden", st)?;
    let env = task_env(cfg);
    let mut systems = BTreeMap::new();
    let mut policies = Vec::new();
    for name in ["stage1", "stage2", "stage3"] {
        let p = load_checkpoint(lay, name, st)?;
        systems.insert(name.to_string(), eval_policy(&p, &golden, &env).map_err(train_err(st))?);
        policies.push(p);
    }
    let legacy = legacy_pipeline(cfg).map_err(fail(st, ErrorKind::Config))?;
    systems.insert("legacy".into(), eval_legacy(&legacy, &golden).map_err(fail(st, ErrorKind::Data))?);

    let (kept, filter) = grpo_filter(&golden, &policies[1], &env, &cfg.train.grpo, cfg.seed).map_err(train_err(st))?;
    let slice: Vec<AnnotatedExample> = kept.iter().map(|r| golden[r.index].clone()).collect();
    let n = cfg.eval.reward_samples;
    let t = cfg.eval.reward_temperature;
    let r2 = expected_reward(&policies[1], &slice, &env, n, t, cfg.seed).map_err(train_err(st))?;
    let r3 = expected_reward(&policies[2], &slice, &env, n, t, cfg.seed).map_err(train_err(st))?;
    let heldout = HeldoutReport { filter, samples_per_example: n, stage2_reward: r2, stage3_reward: r3, gain: r3 - r2 };

    let o = |k: &str| systems[k].scores.overall;
    let summary = EvalSummary {
        monotone: o("stage1") <= o("stage2") && o("stage2") <= o("stage3"),
        reward_gain_ok: !slice.is_empty() && heldout.gain >= REWARD_MARGIN,
        legacy_below_stage3: o("legacy") < o("stage3"),
        systems,
        heldout,
    };
    write_json(&lay.report("eval"), &summary).map_err(io_err(st))?;
    Ok(summary)
}

/// Snapshot of the stage-3 policy over the golden queries plus `extra`.
pub fn precompute_snapshot(cfg: &Config, lay: &Layout, extra: &[String], version: u64) -> Result<PrecomputeReport, PipelineError> {
    let st = "precompute";
    let policy = load_checkpoint(lay, "stage3", st)?;
    let golden = load_split(lay, "golden", st)?;
    let legacy = legacy_pipeline(cfg).map_err(fail(st, ErrorKind::Config))?;
    let mut queries: Vec<String> = golden.iter().map(|g| g.query.clone()).collect();
    queries.extend(extra.iter().cloned());
    let env = task_env(cfg);
    let (snap, report) =
        precompute(&queries, &policy, &env, &legacy, &cfg.instruction, &cfg.rules, version, cfg.serving.lowercase);
    write_snapshot(&lay.snapshot(), &snap).map_err(|e| fail(st, ErrorKind::Serving)(e.to_string()))?;
    write_json(&lay.report("precompute"), &report).map_err(|e| fail(st, ErrorKind::Serving)(e.to_string()))?;
    if report.fallback_fraction > cfg.serving.fallback_ceiling {
        log::warn!(
            "{:.1}% of snapshot entries fell back to the legacy pipeline (ceiling {:.1}%)",
            100.0 * report.fallback_fraction,
            100.0 * cfg.serving.fallback_ceiling
        );
    }
    Ok(report)
}

fn unix_now() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Runs every stage in order into `lay`, reporting each stage's wall time
/// to `progress`, and writes the manifest.
pub fn repro(cfg: &Config, lay: &Layout, mut progress: impl FnMut(&str, f64)) -> Result<RunManifest, PipelineError> {
    let started_at = unix_now();
    cfg.check().map_err(|e| fail("config", ErrorKind::Config)(e.to_string()))?;
    std::fs::create_dir_all(&lay.root).map_err(io_err("config"))?;
    crate::pipeline::write_atomic(&lay.config(), cfg.to_toml().as_bytes()).map_err(io_err("config"))?;

    let mut timed = |name: &str, f: &mut dyn FnMut() -> Result<(), PipelineError>| -> Result<(), PipelineError> {
        let t = Instant::now();
        f()?;
        progress(name, t.elapsed().as_secs_f64());
        Ok(())
    };
    timed("gen-data", &mut || gen_data(cfg, lay).map(|_| ()))?;
    timed("pseudo-label", &mut || pseudo_label(cfg, lay).map(|_| ()))?;
    timed("train stage1", &mut || train_stage1(cfg, lay).map(|_| ()))?;
    timed("train stage2", &mut || train_stage2(cfg, lay).map(|_| ()))?;
    timed("filter", &mut || filter(cfg, lay).map(|_| ()))?;
    timed("train stage3", &mut || train_stage3(cfg, lay).map(|_| ()))?;
    let mut summary = None;
    timed("eval", &mut || {
        summary = Some(evaluate(cfg, lay)?);
        Ok(())
    })?;
    timed("precompute", &mut || precompute_snapshot(cfg, lay, &[], 1).map(|_| ()))?;

    let st = "manifest";
    let artifacts = hash_tree(&lay.root, &["manifest.json"]).map_err(io_err(st))?;
    let checkpoints =
        ["stage1", "stage2", "stage3"].iter().map(|s| (s.to_string(), format!("model/{s}.ckpt"))).collect();
    let mut m = RunManifest {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        artifacts,
        checkpoints,
        summary: summary.expect("eval ran"),
        started_at,
        finished_at: unix_now(),
        hash: String::new(),
    };
    m.hash = m.compute_hash();
    write_json(&lay.manifest(), &m).map_err(io_err(st))?;
    Ok(m)
}
