use super::*;
use crate::rng;

fn tiny(layers: usize) -> Policy {
    let vocab = Vocab::build(&["<Q>", "</Q>"], ["abcdefgh{}[]\":,0123"]);
    let cfg = PolicyConfig { d_model: 16, n_heads: 2, n_layers: layers, d_ff: 24, context: 40, init_std: 0.3 };
    Policy::new(cfg, vocab, &mut rng::stream(3, "tiny", &[])).unwrap()
}

fn random_seq(r: &mut rng::Rng, v: usize, n: usize) -> Vec<u32> {
    (0..n).map(|_| r.gen_range(4..v as u32)).collect()
}

#[test]
fn uniform_logits_give_minus_ln_v() {
    let mut p = tiny(1);
    p.w.w_out.fill(0.0);
    p.w.b_out.fill(0.0);
    let v = p.vocab.len() as f64;
    let (total, per) = p.log_prob(&[BOS, 5, 6], &[7, 8, EOS]).unwrap();
    for x in &per {
        assert!((x + v.ln()).abs() < 1e-12);
    }
    assert!((total - per.iter().sum::<f64>()).abs() < 1e-9);
}

#[test]
fn softmax_rows_sum_to_one() {
    let p = tiny(2);
    let l = p.logits(&[BOS, 9, 10, 11], &[4, 5, 6, 7]).unwrap();
    for row in softmax_rows(l.view()).rows() {
        assert!((row.sum() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn context_overflow_is_an_error() {
    let p = tiny(1);
    let long = vec![5; 39];
    assert!(matches!(p.log_prob(&long, &[5, 5, 5]), Err(PolicyError::Context { .. })));
    assert!(p.log_prob(&long, &[5, 5]).is_ok());
}

fn check_fd(p: &Policy, f: &dyn Fn(&Policy) -> (f64, Weights), coords: &[usize]) {
    let (_, g) = f(p);
    let h = 1e-4;
    for &i in coords {
        let mut q = p.clone();
        let x = q.w.get(i);
        q.w.set(i, x + h);
        let up = f(&q).0;
        q.w.set(i, x - h);
        let down = f(&q).0;
        let num = (up - down) / (2.0 * h);
        let ana = g.get(i);
        let rel = (num - ana).abs() / ana.abs().max(num.abs()).max(1e-6);
        assert!(rel < 1e-4, "coord {i}: analytic {ana} numeric {num} rel {rel}");
    }
}

#[test]
fn gradients_match_finite_differences() {
    let p = tiny(2);
    let mut r = rng::stream(1, "fd", &[]);
    let prompt = [vec![BOS], random_seq(&mut r, p.vocab.len(), 6)].concat();
    let target = [random_seq(&mut r, p.vocab.len(), 5), vec![EOS]].concat();
    let mut reference = p.clone();
    for s in reference.w.slices_mut() {
        for x in s {
            *x += 0.05 * r.gen_range(-1.0..1.0);
        }
    }
    let ref_logits = reference.logits(&prompt, &target).unwrap();
    let loss = |q: &Policy| {
        q.loss_and_grad(&prompt, &target, |l| {
            let (a, ga) = nll_loss(l, &target, 0.7);
            let (kl, gk) = exact_kl(l, ref_logits.view());
            let n = kl.len() as f64;
            (a + 0.3 * kl.iter().sum::<f64>() / n, ga + gk * (0.3 / n))
        })
        .unwrap()
    };
    let n = p.w.n_params();
    let mut coords: Vec<usize> = (0..60).map(|_| r.gen_range(0..n)).collect();
    // make sure every tensor kind is touched
    let mut off = 0;
    for s in p.w.slices() {
        coords.push(off + s.len() / 2);
        off += s.len();
    }
    check_fd(&p, &loss, &coords);
}

#[test]
fn ce_gradient_is_p_minus_onehot() {
    let p = tiny(1);
    let (_, g) = p.loss_and_grad(&[BOS], &[7], |l| nll_loss(l, &[7], 1.0)).unwrap();
    let probs = softmax_rows(p.logits(&[BOS], &[7]).unwrap().view());
    for v in 0..p.vocab.len() {
        let expect = probs[[0, v]] - if v == 7 { 1.0 } else { 0.0 };
        assert!((g.b_out[v] - expect).abs() < 1e-12);
    }
}

#[test]
fn zero_weight_gives_zero_gradient() {
    let p = tiny(1);
    let (_, g) = p.loss_and_grad(&[BOS, 5], &[6, EOS], |l| nll_loss(l, &[6, EOS], 0.0)).unwrap();
    assert_eq!(g.norm(), 0.0);
}

#[test]
fn non_finite_loss_is_an_error() {
    let p = tiny(1);
    let r = p.loss_and_grad(&[BOS], &[5], |l| (f64::NAN, l.to_owned()));
    assert!(matches!(r, Err(PolicyError::NonFinite(_))));
}

#[test]
fn incremental_decode_matches_teacher_forcing() {
    let p = tiny(2);
    let mut r = rng::stream(5, "dec", &[]);
    let prompt = [vec![BOS], random_seq(&mut r, p.vocab.len(), 5)].concat();
    for i in 0..20 {
        let ro = p.sample(&prompt, 1.0, 30, &mut rng::stream(5, "s", &[i])).unwrap();
        assert_eq!(ro.per_token_logp.len(), ro.gen_ids.len());
        assert!(ro.per_token_logp.iter().all(|x| *x <= 0.0));
        let (total, per) = p.log_prob(&prompt, &ro.gen_ids).unwrap();
        assert!((total - ro.total_logp()).abs() < 1e-9);
        for (a, b) in per.iter().zip(&ro.per_token_logp) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn sampling_is_deterministic_and_cold_limit_is_greedy() {
    let p = tiny(1);
    let prompt = [BOS, 5, 9];
    let a = p.sample(&prompt, 0.8, 20, &mut rng::stream(1, "x", &[])).unwrap();
    let b = p.sample(&prompt, 0.8, 20, &mut rng::stream(1, "x", &[])).unwrap();
    assert_eq!(a, b);
    let g = p.greedy(&prompt, 20).unwrap();
    let cold = p.sample(&prompt, 1e-6, 20, &mut rng::stream(2, "x", &[])).unwrap();
    assert_eq!(g.gen_ids, cold.gen_ids);
    let group = p.sample_group(&prompt, 0.8, 20, &mut [rng::stream(1, "x", &[])]).unwrap();
    assert_eq!(group[0], a);
}

#[test]
fn generation_respects_context() {
    let p = tiny(1);
    let prompt = vec![BOS; 38];
    let ro = p.sample(&prompt, 1.0, 100, &mut rng::stream(1, "c", &[])).unwrap();
    assert!(ro.gen_ids.len() <= 3);
    p.log_prob(&prompt, &ro.gen_ids).unwrap();
}

#[test]
fn sampler_frequencies_match_softmax() {
    let logits = Array1::from(vec![1.0, 0.2, -0.5, 2.0, 0.0]);
    let lp = log_softmax_vec(logits.view());
    let probs = lp.mapv(f64::exp);
    let n = 100_000;
    let mut counts = [0usize; 5];
    let mut r = rng::stream(9, "mc", &[]);
    for _ in 0..n {
        counts[sample_index(&lp, 1.0, &mut r)] += 1;
    }
    for (c, p) in counts.iter().zip(probs.iter()) {
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((*c as f64 - n as f64 * p).abs() < 3.0 * sd + 1.0, "{counts:?} vs {probs}");
    }
}

#[test]
fn adam_matches_hand_recurrence() {
    let cfg = AdamConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: None };
    let mut opt = Adam::new(cfg, 1);
    let mut x = [1.0];
    let grads = [0.5, -0.2, 0.3, 0.0, 1.0];
    let (mut m, mut v, mut want) = (0.0f64, 0.0f64, 1.0f64);
    for (t, g) in grads.iter().enumerate() {
        opt.step_flat(&mut x, &[*g]);
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
        let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
        want -= 0.1 * mh / (vh.sqrt() + 1e-8);
        assert!((x[0] - want).abs() < 1e-15);
    }
    let mut fresh = Adam::new(cfg, 3);
    let mut y = [0.25, -1.0, 3.0];
    fresh.step_flat(&mut y, &[0.0; 3]);
    assert_eq!(y, [0.25, -1.0, 3.0]);
}

#[test]
fn memorizes_small_set() {
    let vocab = Vocab::build::<&str>(&[], ["abcdefghij"]);
    let cfg = PolicyConfig { d_model: 32, n_heads: 2, n_layers: 1, d_ff: 64, context: 16, init_std: 0.1 };
    let mut p = Policy::new(cfg, vocab, &mut rng::stream(4, "mem", &[])).unwrap();
    let mut r = rng::stream(4, "data", &[]);
    let data: Vec<(Vec<u32>, Vec<u32>)> = (0..50)
        .map(|_| {
            let prompt = [vec![BOS], random_seq(&mut r, p.vocab.len(), 3)].concat();
            let target = [random_seq(&mut r, p.vocab.len(), 3), vec![EOS]].concat();
            (prompt, target)
        })
        .collect();
    let mut opt = Adam::new(AdamConfig { lr: 1e-2, clip_norm: Some(1.0), ..Default::default() }, p.w.n_params());
    let mut loss = f64::INFINITY;
    for _ in 0..2000 {
        let parts: Vec<(f64, Weights)> = data
            .iter()
            .map(|(pr, t)| p.loss_and_grad(pr, t, |l| nll_loss(l, t, 1.0 / data.len() as f64)).unwrap())
            .collect();
        loss = parts.iter().map(|x| x.0).sum();
        if loss < 0.01 {
            break;
        }
        let g = sum_grads(parts.into_iter().map(|x| x.1)).unwrap();
        opt.step(&mut p.w, &g);
    }
    assert!(loss < 0.01, "loss {loss}");
}

#[test]
fn checkpoint_round_trip_and_rejections() {
    let p = tiny(2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    p.save(&path).unwrap();
    let q = Policy::load(&path).unwrap();
    assert_eq!(p.w.to_flat(), q.w.to_flat());
    assert_eq!(p.to_bytes(), q.to_bytes());
    assert!(Policy::load_expecting(&path, &p.config_hash()).is_ok());
    assert!(matches!(Policy::load_expecting(&path, &tiny(1).config_hash()), Err(PolicyError::ConfigMismatch { .. })));

    let mut bytes = p.to_bytes();
    bytes[0] = b'X';
    assert!(matches!(Policy::from_bytes(&bytes), Err(PolicyError::Checkpoint(_))));
    let mut bytes = p.to_bytes();
    bytes[60] ^= 1;
    assert!(matches!(Policy::from_bytes(&bytes), Err(PolicyError::Checkpoint(_))));
    let bytes = p.to_bytes();
    assert!(Policy::from_bytes(&bytes[..bytes.len() - 7]).is_err());
}
