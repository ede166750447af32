use rayon::prelude::*;
use serde::Serialize;

use super::{TaskEnv, TrainError};
use crate::metrics::{composite_reward, corpus_scores, MetricError, SubTaskScores};
use crate::policy::Policy;
use crate::rng;
use crate::schema::{parse_output, AnnotatedExample, QPOutput};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GreedyOutput {
    pub id: u64,
    pub text: String,
    #[serde(skip)]
    pub parsed: Option<QPOutput>,
    pub error: Option<String>,
}

/// Greedy decode of every example, strictly parsed against its query.
pub fn greedy_outputs(policy: &Policy, examples: &[AnnotatedExample], env: &TaskEnv) -> Result<Vec<GreedyOutput>, TrainError> {
    examples
        .par_iter()
        .map(|ex| {
            let prompt = env.prompt_ids(ex, &policy.vocab)?;
            let r = policy.greedy(&prompt, env.max_gen_len)?;
            let (parsed, error) = match parse_output(&r.text, &ex.query, &env.schema) {
                Ok(o) => (Some(o), None),
                Err(e) => (None, Some(e.to_string())),
            };
            Ok(GreedyOutput { id: ex.id, text: r.text, parsed, error })
        })
        .collect()
}

/// Corpus scores of decoded outputs; unparseable outputs predict nothing.
pub fn score_outputs(outputs: &[GreedyOutput], examples: &[AnnotatedExample]) -> Result<SubTaskScores, MetricError> {
    let pairs: Vec<(Option<&QPOutput>, &QPOutput)> =
        outputs.iter().zip(examples).map(|(o, ex)| (o.parsed.as_ref(), &ex.gold)).collect();
    corpus_scores(&pairs)
}

/// Mean composite reward of `n_samples` sampled rollouts per example. Sample
/// streams depend only on (seed, example id, sample index), so two policies
/// evaluated with the same seed share their random numbers.
pub fn expected_reward(
    policy: &Policy,
    examples: &[AnnotatedExample],
    env: &TaskEnv,
    n_samples: usize,
    temperature: f64,
    seed: u64,
) -> Result<f64, TrainError> {
    if examples.is_empty() || n_samples == 0 {
        return Ok(0.0);
    }
    let per: Vec<f64> = examples
        .par_iter()
        .map(|ex| {
            let prompt = env.prompt_ids(ex, &policy.vocab)?;
            let mut rngs: Vec<rng::Rng> =
                (0..n_samples as u64).map(|i| rng::stream(seed, "eval-reward", &[ex.id, i])).collect();
            let rs = policy.sample_group(&prompt, temperature, env.max_gen_len, &mut rngs)?;
            Ok(rs.iter().map(|r| composite_reward(&r.text, ex, &env.weights, &env.schema, &env.band).total).sum::<f64>())
        })
        .collect::<Result<_, TrainError>>()?;
    Ok(per.iter().sum::<f64>() / (examples.len() * n_samples) as f64)
}
