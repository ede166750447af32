use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use qpone::policy::nll_loss;
use qpone::rng;
use qpone_bench::fixture;

fn policy(c: &mut Criterion) {
    let f = fixture();
    let ex = &f.corpus.golden[0];
    let prompt = f.env.prompt_ids(ex, &f.policy.vocab).unwrap();
    let enc = f.env.encode_all(std::slice::from_ref(ex), &f.policy.vocab).unwrap();

    let mut g = c.benchmark_group("policy");
    g.sample_size(20);
    g.bench_function("greedy rollout (48 tokens)", |b| b.iter(|| black_box(f.policy.greedy(&prompt, 48).unwrap())));
    g.bench_function("sampled group of 8 (48 tokens)", |b| {
        b.iter(|| {
            let mut rngs: Vec<_> = (0..8u64).map(|i| rng::stream(1, "bench", &[i])).collect();
            black_box(f.policy.sample_group(&prompt, 1.0, 48, &mut rngs).unwrap())
        })
    });
    let (p, t) = (&enc[0].prompt, &enc[0].target);
    g.bench_function("sft loss and gradient", |b| {
        b.iter(|| black_box(f.policy.loss_and_grad(p, t, |l| nll_loss(l, t, 1.0)).unwrap()))
    });
    g.finish();
}

criterion_group!(benches, policy);
criterion_main!(benches);
