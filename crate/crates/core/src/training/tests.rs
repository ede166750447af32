use super::*;
use crate::legacy::{generate_corpus, pseudo_label_all, CorpusProfile, CorpusSizes, LegacyConfig, LegacyPipeline};
use crate::policy::{exact_kl, PolicyConfig, Rollout};
use crate::schema::{full_coverage, serialize_output, BusinessRules, Ontology, SubTask, Taxonomy};
use ndarray::Array2;
use proptest::prelude::*;

struct Fixture {
    policy: Policy,
    env: TaskEnv,
    unified: Vec<AnnotatedExample>,
    aux: Vec<AnnotatedExample>,
}

fn fixture() -> Fixture {
    let profile = CorpusProfile::default();
    let sizes = CorpusSizes { n_unified: 24, n_qlog: 12, n_golden: 4, n_pool: 4 };
    let corpus = generate_corpus(5, sizes, &profile, "解析", &BusinessRules::default()).unwrap();
    let legacy = LegacyPipeline::new(LegacyConfig::from_profile(&profile, "Beauty")).unwrap();
    let aux = pseudo_label_all(&legacy, &corpus.qlog, 5);
    let types: std::collections::BTreeSet<String> = profile.entities.iter().map(|e| e.etype.clone()).collect();
    let schema = Schema { ontology: Ontology::from_labels(types), taxonomy: Taxonomy::from_labels(profile.categories()) };
    let texts: Vec<String> = corpus
        .unified
        .iter()
        .flat_map(|e| [e.query.clone(), serialize_output(&e.gold).unwrap()].into_iter().chain(e.hist.clone()).chain(e.notes.clone()))
        .chain(aux.iter().map(|e| serialize_covered(&e.gold, &e.coverage)))
        .chain(["<I></I><R></R><H></H><N></N><Q></Q>\n\t解析".to_string()])
        .collect();
    let vocab = Vocab::build::<&str>(&[], texts.iter().map(String::as_str));
    let cfg = PolicyConfig { d_model: 16, n_heads: 2, n_layers: 1, d_ff: 32, context: 256, init_std: 0.1 };
    let policy = Policy::new(cfg, vocab, &mut rng::stream(1, "init", &[])).unwrap();
    let env = TaskEnv {
        prompt: PromptConfig { max_prompt_len: 128, ..Default::default() },
        schema,
        weights: RewardWeights::default(),
        band: IntentBand::default(),
        max_gen_len: 24,
    };
    Fixture { policy, env, unified: corpus.unified, aux }
}

fn sft_cfg(steps: usize) -> SftConfig {
    SftConfig { steps, batch_size: 3, aux_batch_size: 2, adam: AdamConfig::default() }
}

#[test]
fn lambda_zero_matches_stage2_bitwise() {
    let f = fixture();
    let unified = f.env.encode_all(&f.unified, &f.policy.vocab).unwrap();
    let aux_sets = group_by_task(&f.aux).map(|v| v.iter().map(|e| f.env.encode(e, &f.policy.vocab).unwrap()).collect());
    let (mut a, mut b) = (f.policy.clone(), f.policy.clone());
    let la = stage1_mixed_sft(&mut a, &unified, &aux_sets, 0.0, &sft_cfg(3), 9).unwrap();
    let lb = stage2_sft(&mut b, &unified, &sft_cfg(3), 9).unwrap();
    assert_eq!(a.w.to_flat(), b.w.to_flat());
    for (x, y) in la.iter().zip(&lb) {
        assert_eq!(x.loss.to_bits(), y.loss.to_bits());
    }
}

#[test]
fn mixed_loss_is_sum_of_components() {
    let f = fixture();
    let v = &f.policy.vocab;
    let unified = f.env.encode_all(&f.unified[..4], v).unwrap();
    let groups = group_by_task(&f.aux);
    let aux: Vec<Vec<Encoded>> = groups.iter().map(|g| g.iter().take(2).map(|e| f.env.encode(e, v).unwrap()).collect()).collect();
    let ub: Vec<&Encoded> = unified.iter().collect();
    let ab: [Vec<&Encoded>; 5] = std::array::from_fn(|k| aux[k].iter().collect());
    let (total, lu, la, _) = sft_objective(&f.policy, &ub, &ab, 1.0).unwrap();
    let mean_nll = |set: &[&Encoded]| {
        set.iter().map(|e| -f.policy.log_prob(&e.prompt, &e.target).unwrap().0 / e.target.len() as f64).sum::<f64>()
            / set.len() as f64
    };
    assert!((lu - mean_nll(&ub)).abs() < 1e-9);
    let mut sum = mean_nll(&ub);
    for k in 0..5 {
        assert!((la[k] - mean_nll(&ab[k])).abs() < 1e-9);
        sum += mean_nll(&ab[k]);
    }
    assert!((total - sum).abs() < 1e-9);
}

#[test]
fn empty_unified_is_an_error() {
    let mut f = fixture();
    assert!(matches!(stage2_sft(&mut f.policy, &[], &sft_cfg(1), 1), Err(TrainError::Data(_))));
}

#[test]
fn sft_loss_decreases() {
    let f = fixture();
    let unified = f.env.encode_all(&f.unified, &f.policy.vocab).unwrap();
    let mut p = f.policy.clone();
    let cfg = SftConfig { steps: 60, batch_size: 4, aux_batch_size: 0, adam: AdamConfig { lr: 1e-2, ..Default::default() } };
    let logs = stage2_sft(&mut p, &unified, &cfg, 3).unwrap();
    let head: f64 = logs[..10].iter().map(|l| l.loss).sum::<f64>() / 10.0;
    let tail: f64 = logs[50..].iter().map(|l| l.loss).sum::<f64>() / 10.0;
    assert!(logs.iter().all(|l| l.loss.is_finite()));
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn filter_rule_examples() {
    let all = full_coverage();
    let d = |s: [f64; 5]| filter_decision(&s, &all, 0.1, 0.05, false);
    assert_eq!(d([0.3, 0.0, 0.0, 0.0, 0.0]), FilterOutcome::Retain(SubTask::Ner));
    assert!(matches!(d([0.3, 0.2, 0.0, 0.0, 0.0]), FilterOutcome::MultipleDivergent(_)));
    assert_eq!(d([0.0; 5]), FilterOutcome::NoDivergence);
    assert!(matches!(d([0.0, 0.3, 0.0, 0.07, 0.0]), FilterOutcome::Inconsistent(_)));
    let relaxed = filter_decision(&[0.3, 0.2, 0.0, 0.0, 0.0], &all, 0.1, 0.05, true);
    assert_eq!(relaxed, FilterOutcome::Retain(SubTask::Ner));
    // identical rollouts
    let rows = vec![[1.0, 0.5, 0.5, 1.0, 1.0]; 8];
    assert_eq!(d(group_stds(&rows)), FilterOutcome::NoDivergence);
}

#[test]
fn equal_rewards_give_zero_advantages() {
    assert_eq!(advantages(&[0.7; 6], 1e-8), vec![0.0; 6]);
}

proptest! {
    #[test]
    fn advantage_normalization(steps in prop::collection::vec(0u32..100, 2..17)) {
        let rewards: Vec<f64> = steps.iter().map(|s| *s as f64 * 0.05).collect();
        let a = advantages(&rewards, 1e-8);
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        if rewards.iter().any(|r| *r != rewards[0]) {
            prop_assert!(mean.abs() < 1e-6);
            prop_assert!((std - 1.0).abs() < 1e-4);
        } else {
            prop_assert!(a.iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn kl_is_non_negative(vals in prop::collection::vec(-5.0f64..5.0, 12)) {
        let a = Array2::from_shape_vec((2, 6), vals.clone()).unwrap();
        let b = Array2::from_shape_vec((2, 6), vals.iter().rev().copied().collect()).unwrap();
        let (kl, _) = exact_kl(a.view(), b.view());
        prop_assert!(kl.iter().all(|k| *k >= -1e-9));
        let (same, g) = exact_kl(a.view(), a.view());
        prop_assert!(same.iter().all(|k| k.abs() < 1e-9));
        prop_assert!(g.iter().all(|x| x.abs() < 1e-9));
    }
}

fn probe_group(p: &Policy, prompt: &[u32], winner: Vec<u32>, loser: Vec<u32>) -> GroupRollout {
    let mk = |ids: Vec<u32>| {
        let (_, per) = p.log_prob(prompt, &ids).unwrap();
        Rollout { prompt_ids: prompt.to_vec(), text: p.vocab.decode(&ids), gen_ids: ids, per_token_logp: per, finished: true }
    };
    let rewards = vec![1.0, 0.0];
    GroupRollout {
        example_id: 0,
        rollouts: vec![mk(winner), mk(loser)],
        advantages: advantages(&rewards, 1e-8),
        rewards,
        per_task: vec![[0.0; 5]; 2],
        parsed: vec![true; 2],
    }
}

#[test]
fn two_rollout_probe_moves_winner_up_loser_down() {
    let f = fixture();
    let mut r = rng::stream(2, "probe", &[]);
    for trial in 0..5 {
        let mut p = f.policy.clone();
        let prompt = f.env.prompt_ids(&f.unified[trial], &p.vocab).unwrap();
        let gen = |r: &mut rng::Rng| -> Vec<u32> { (0..6).map(|_| rand::Rng::gen_range(r, 4..p.vocab.len() as u32)).collect() };
        let (w, l) = (gen(&mut r), gen(&mut r));
        let g = probe_group(&p, &prompt, w.clone(), l.clone());
        let before = (p.log_prob(&prompt, &w).unwrap().0, p.log_prob(&prompt, &l).unwrap().0);
        let reference = p.clone();
        let mut opt = Adam::new(AdamConfig { lr: 1e-3, ..Default::default() }, p.w.n_params());
        update_from_groups(&mut p, &reference, &[g], 0.0, &mut opt).unwrap();
        let after = (p.log_prob(&prompt, &w).unwrap().0, p.log_prob(&prompt, &l).unwrap().0);
        assert!(after.0 > before.0, "trial {trial}: winner {} -> {}", before.0, after.0);
        assert!(after.1 < before.1, "trial {trial}: loser {} -> {}", before.1, after.1);
    }
}

#[test]
fn grpo_with_zero_advantage_and_beta_is_a_no_op() {
    let f = fixture();
    let mut p = f.policy.clone();
    let prompt = f.env.prompt_ids(&f.unified[0], &p.vocab).unwrap();
    let mut g = probe_group(&p, &prompt, vec![5, 6], vec![7, 8]);
    g.advantages = vec![0.0, 0.0];
    let reference = p.clone();
    let mut opt = Adam::new(AdamConfig::default(), p.w.n_params());
    let (_, kl, _) = update_from_groups(&mut p, &reference, &[g], 0.0, &mut opt).unwrap();
    assert_eq!(p, reference);
    assert!(kl.abs() < 1e-9);
}

#[test]
fn stage3_runs_and_zero_steps_is_identity() {
    let f = fixture();
    let cfg = TrainConfig::default();
    let data: Vec<&AnnotatedExample> = f.unified.iter().take(4).collect();
    let mut p = f.policy.clone();
    let zero = GrpoConfig { steps: 0, ..cfg.grpo.clone() };
    train_stage3(&mut p, &f.policy, &data, &f.env, &zero, 1, |_, _, _| Ok(())).unwrap();
    assert_eq!(p, f.policy);

    let two = GrpoConfig { steps: 2, group_size: 3, batch_size: 2, ..cfg.grpo };
    let mut seen = 0;
    let logs = train_stage3(&mut p, &f.policy, &data, &f.env, &two, 1, |log, groups, _| {
        seen += 1;
        assert!(log.kl.unwrap() >= -1e-9);
        for g in groups {
            assert_eq!(g.rollouts.len(), 3);
        }
        Ok(())
    })
    .unwrap();
    assert_eq!((logs.len(), seen), (2, 2));
    let mut q = f.policy.clone();
    train_stage3(&mut q, &f.policy, &data, &f.env, &two, 1, |_, _, _| Ok(())).unwrap();
    assert_eq!(p, q);
}

#[test]
fn filter_is_deterministic_and_consistent() {
    let f = fixture();
    let cfg = TrainConfig::default().grpo;
    let (kept, report) = grpo_filter(&f.unified[..6], &f.policy, &f.env, &cfg, 4).unwrap();
    let (again, _) = grpo_filter(&f.unified[..6], &f.policy, &f.env, &cfg, 4).unwrap();
    assert_eq!(kept, again);
    assert_eq!(report.examined, 6);
    assert_eq!(report.retained + report.no_divergence + report.multiple_divergent + report.inconsistent, 6);
    for k in &kept {
        let div = k.stds.iter().filter(|s| **s > cfg.tau_div).count();
        assert_eq!(div, 1);
        assert!(k.stds.iter().all(|s| *s > cfg.tau_div || *s <= cfg.tau_cons));
    }
}

#[test]
fn config_checks() {
    let mut c = TrainConfig::default();
    c.check().unwrap();
    c.grpo.tau_cons = 0.2;
    assert!(c.check().is_err());
    let mut c = TrainConfig::default();
    c.grpo.group_size = 1;
    assert!(c.check().is_err());
}
