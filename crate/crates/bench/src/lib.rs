//! Shared fixtures for the benchmarks.

use qpone::legacy::{generate_corpus, Corpus, CorpusSizes};
use qpone::pipeline::{build_vocab, schema_of, task_env, Config};
use qpone::policy::Policy;
use qpone::rng;
use qpone::schema::AnnotatedExample;
use qpone::training::TaskEnv;

pub struct Fixture {
    pub corpus: Corpus,
    pub env: TaskEnv,
    pub policy: Policy,
}

/// Small default-profile corpus and an untrained default-size policy.
pub fn fixture() -> Fixture {
    let cfg = Config::default();
    let sizes = CorpusSizes { n_unified: 200, n_qlog: 10, n_golden: 50, n_pool: 10 };
    let corpus = generate_corpus(cfg.seed, sizes, &cfg.profile, &cfg.instruction, &cfg.rules).expect("corpus");
    let refs: Vec<&AnnotatedExample> = corpus.unified.iter().chain(&corpus.golden).collect();
    let vocab = build_vocab(&cfg, &schema_of(&cfg), &refs);
    let policy = Policy::new(cfg.policy.clone(), vocab, &mut rng::stream(cfg.seed, "policy-init", &[])).expect("policy");
    Fixture { env: task_env(&cfg), corpus, policy }
}
