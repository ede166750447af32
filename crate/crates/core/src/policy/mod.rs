//! Small autoregressive transformer over a character-level vocabulary, with
//! exact log-likelihoods, ancestral sampling and hand-written gradients.

mod checkpoint;
mod model;
mod optim;
mod vocab;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use model::{log_softmax, log_softmax_vec, Layer, PolicyConfig, Trace, Weights};
pub use optim::{Adam, AdamConfig};
pub use vocab::{Vocab, BOS, EOS, PAD, UNK};

use model::{gelu_vec, ln_vec};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("sequence of {len} positions exceeds context {context}")]
    Context { len: usize, context: usize },
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("invalid policy config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint config hash {found} does not match expected {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Policy = architecture + vocabulary + weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub cfg: PolicyConfig,
    pub vocab: Vocab,
    pub w: Weights,
}

/// One generated continuation with its temperature-1 log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rollout {
    pub prompt_ids: Vec<u32>,
    /// Generated ids; the last one is EOS when `finished`.
    pub gen_ids: Vec<u32>,
    pub per_token_logp: Vec<f64>,
    pub text: String,
    pub finished: bool,
}

impl Rollout {
    pub fn total_logp(&self) -> f64 {
        self.per_token_logp.iter().sum()
    }
}

/// Incremental decoding state: cached keys and values of every fed position.
#[derive(Debug, Clone)]
pub struct DecodeState {
    pos: usize,
    last: u32,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    logits: Array1<f64>,
}

impl DecodeState {
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Next-token logits after the last fed token.
    pub fn logits(&self) -> &Array1<f64> {
        &self.logits
    }
}

#[derive(Serialize)]
struct HashInput<'a> {
    cfg: &'a PolicyConfig,
    vocab: &'a Vocab,
}

impl Policy {
    pub fn new(cfg: PolicyConfig, vocab: Vocab, rng: &mut impl Rng) -> Result<Self, PolicyError> {
        cfg.check().map_err(PolicyError::Config)?;
        let w = Weights::init(&cfg, vocab.len(), rng);
        Ok(Self { cfg, vocab, w })
    }

    /// SHA-256 (hex) of architecture and vocabulary.
    pub fn config_hash(&self) -> String {
        let j = serde_json::to_vec(&HashInput { cfg: &self.cfg, vocab: &self.vocab }).expect("serializable");
        hex::encode(Sha256::digest(j))
    }

    pub fn zero_grad(&self) -> Weights {
        Weights::zeros(&self.cfg, self.vocab.len())
    }

    pub fn logits(&self, prompt: &[u32], target: &[u32]) -> Result<Array2<f64>, PolicyError> {
        self.w.forward(&self.cfg, prompt, target).map(|(l, _)| l)
    }

    /// Teacher-forced log-likelihood of `target` after `prompt`.
    pub fn log_prob(&self, prompt: &[u32], target: &[u32]) -> Result<(f64, Vec<f64>), PolicyError> {
        let lp = log_softmax(self.logits(prompt, target)?.view());
        let per: Vec<f64> = target.iter().enumerate().map(|(i, &t)| lp[[i, t as usize]]).collect();
        Ok((per.iter().sum(), per))
    }

    /// Loss and gradient for one sequence. `loss` maps the scored logits
    /// (one row per target token) to a scalar and its logit gradient.
    pub fn loss_and_grad(
        &self,
        prompt: &[u32],
        target: &[u32],
        loss: impl FnOnce(ArrayView2<f64>) -> (f64, Array2<f64>),
    ) -> Result<(f64, Weights), PolicyError> {
        let (logits, trace) = self.w.forward(&self.cfg, prompt, target)?;
        let (value, dlogits) = loss(logits.view());
        if !value.is_finite() {
            return Err(PolicyError::NonFinite(format!("loss {value}")));
        }
        if dlogits.dim() != logits.dim() {
            return Err(PolicyError::Shape("dlogits shape differs from logits".into()));
        }
        let mut g = self.zero_grad();
        self.w.backward(&self.cfg, &trace, dlogits.view(), &mut g);
        Ok((value, g))
    }

    pub fn start(&self, prompt: &[u32]) -> Result<DecodeState, PolicyError> {
        if prompt.is_empty() {
            return Err(PolicyError::Shape("empty prompt".into()));
        }
        if prompt.len() > self.cfg.context {
            return Err(PolicyError::Context { len: prompt.len(), context: self.cfg.context });
        }
        let n = self.cfg.n_layers;
        let mut st = DecodeState {
            pos: 0,
            last: PAD,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            logits: Array1::zeros(self.vocab.len()),
        };
        for &t in prompt {
            self.feed(&mut st, t)?;
        }
        Ok(st)
    }

    pub fn feed(&self, st: &mut DecodeState, tok: u32) -> Result<(), PolicyError> {
        let (d, nh) = (self.cfg.d_model, self.cfg.n_heads);
        if st.pos >= self.cfg.context {
            return Err(PolicyError::Context { len: st.pos + 1, context: self.cfg.context });
        }
        if tok as usize >= self.vocab.len() {
            return Err(PolicyError::Shape(format!("token id {tok} outside vocabulary")));
        }
        let dh = d / nh;
        let scale = 1.0 / (dh as f64).sqrt();
        let w = &self.w;
        let mut x = &w.tok_emb.row(tok as usize) + &w.prev_emb.row(st.last as usize) + w.pos_emb.row(st.pos);
        for (li, l) in w.layers.iter().enumerate() {
            let h = ln_vec(x.view(), &l.ln1_g, &l.ln1_b);
            let qkv = h.dot(&l.w_qkv) + &l.b_qkv;
            let qkv = qkv.as_slice().unwrap();
            st.keys[li].extend_from_slice(&qkv[d..2 * d]);
            st.values[li].extend_from_slice(&qkv[2 * d..]);
            let (keys, vals) = (&st.keys[li], &st.values[li]);
            let n = st.pos + 1;
            let mut att = Array1::zeros(d);
            let mut sc = vec![0.0; n];
            for h in 0..nh {
                let q = &qkv[h * dh..(h + 1) * dh];
                for (j, s) in sc.iter_mut().enumerate() {
                    let k = &keys[j * d + h * dh..j * d + (h + 1) * dh];
                    *s = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                let m = sc.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let mut z = 0.0;
                for s in sc.iter_mut() {
                    *s = (*s - m).exp();
                    z += *s;
                }
                for (j, p) in sc.iter().enumerate() {
                    let v = &vals[j * d + h * dh..j * d + (h + 1) * dh];
                    for (o, vv) in att.slice_mut(ndarray::s![h * dh..(h + 1) * dh]).iter_mut().zip(v) {
                        *o += p / z * vv;
                    }
                }
            }
            x = x + att.dot(&l.w_o) + &l.b_o;
            let h2 = ln_vec(x.view(), &l.ln2_g, &l.ln2_b);
            let u = h2.dot(&l.w_ff1) + &l.b_ff1;
            x = x + gelu_vec(&u).dot(&l.w_ff2) + &l.b_ff2;
        }
        let hf = ln_vec(x.view(), &w.lnf_g, &w.lnf_b);
        st.logits = hf.dot(&w.w_out) + &w.b_out;
        st.pos += 1;
        st.last = tok;
        Ok(())
    }

    fn gen_limit(&self, prompt_len: usize, max_len: usize) -> usize {
        max_len.min((self.cfg.context + 1).saturating_sub(prompt_len))
    }

    /// Continues from a prefilled state. `temperature` of `None` decodes
    /// greedily (lowest id on ties).
    pub fn generate_from(
        &self,
        mut st: DecodeState,
        prompt: &[u32],
        temperature: Option<f64>,
        max_len: usize,
        rng: &mut impl Rng,
    ) -> Result<Rollout, PolicyError> {
        let limit = self.gen_limit(prompt.len(), max_len);
        let (mut gen, mut lps) = (Vec::new(), Vec::new());
        let mut finished = false;
        while gen.len() < limit {
            let lp = log_softmax_vec(st.logits.view());
            let tok = match temperature {
                None => argmax(&lp),
                Some(t) => sample_index(&lp, t, rng),
            };
            gen.push(tok as u32);
            lps.push(lp[tok]);
            if tok as u32 == EOS {
                finished = true;
                break;
            }
            if gen.len() < limit {
                self.feed(&mut st, tok as u32)?;
            }
        }
        let text = self.vocab.decode(&gen);
        Ok(Rollout { prompt_ids: prompt.to_vec(), gen_ids: gen, per_token_logp: lps, text, finished })
    }

    /// Ancestral sampling at `temperature`; recorded log-probs are at
    /// temperature 1.
    pub fn sample(&self, prompt: &[u32], temperature: f64, max_len: usize, rng: &mut impl Rng) -> Result<Rollout, PolicyError> {
        if !(temperature > 0.0) {
            return Err(PolicyError::Config(format!("temperature must be positive, got {temperature}")));
        }
        let st = self.start(prompt)?;
        self.generate_from(st, prompt, Some(temperature), max_len, rng)
    }

    /// `rngs.len()` samples sharing one prompt prefill.
    pub fn sample_group<R: Rng>(
        &self,
        prompt: &[u32],
        temperature: f64,
        max_len: usize,
        rngs: &mut [R],
    ) -> Result<Vec<Rollout>, PolicyError> {
        if !(temperature > 0.0) {
            return Err(PolicyError::Config(format!("temperature must be positive, got {temperature}")));
        }
        let st = self.start(prompt)?;
        rngs.iter_mut()
            .map(|r| self.generate_from(st.clone(), prompt, Some(temperature), max_len, r))
            .collect()
    }

    pub fn greedy(&self, prompt: &[u32], max_len: usize) -> Result<Rollout, PolicyError> {
        let st = self.start(prompt)?;
        self.generate_from(st, prompt, None, max_len, &mut rand::rngs::mock::StepRng::new(0, 0))
    }
}

fn argmax(v: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn sample_index(logp: &Array1<f64>, temperature: f64, rng: &mut impl Rng) -> usize {
    let scaled = logp.mapv(|x| x / temperature);
    let p = log_softmax_vec(scaled.view()).mapv(f64::exp);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, pi) in p.iter().enumerate() {
        if *pi > 0.0 {
            last = i;
        }
        acc += pi;
        if u < acc {
            return i;
        }
    }
    last
}

pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    log_softmax(logits).mapv(f64::exp)
}

/// Token-mean negative log-likelihood of `target` given the scored logits,
/// times `weight`, with its logit gradient.
pub fn nll_loss(logits: ArrayView2<f64>, target: &[u32], weight: f64) -> (f64, Array2<f64>) {
    let n = target.len() as f64;
    let lp = log_softmax(logits);
    let mut g = lp.mapv(f64::exp);
    let mut loss = 0.0;
    for (i, &t) in target.iter().enumerate() {
        loss -= lp[[i, t as usize]];
        g[[i, t as usize]] -= 1.0;
    }
    g *= weight / n;
    (weight * loss / n, g)
}

/// Exact per-position KL(p || r) between the softmaxes of two logit rows,
/// and the gradient of each row's KL with respect to the `p` logits.
pub fn exact_kl(logits: ArrayView2<f64>, ref_logits: ArrayView2<f64>) -> (Vec<f64>, Array2<f64>) {
    let lp = log_softmax(logits);
    let lr = log_softmax(ref_logits);
    let mut kls = Vec::with_capacity(lp.nrows());
    let mut g = Array2::zeros(lp.raw_dim());
    for i in 0..lp.nrows() {
        let (a, b) = (lp.row(i), lr.row(i));
        let kl: f64 = a.iter().zip(b).map(|(x, y)| x.exp() * (x - y)).sum();
        for (j, (x, y)) in a.iter().zip(b).enumerate() {
            g[[i, j]] = x.exp() * (x - y - kl);
        }
        kls.push(kl);
    }
    (kls, g)
}

/// Ordered sum of per-item gradients (deterministic regardless of how the
/// items were computed).
pub fn sum_grads(mut grads: impl Iterator<Item = Weights>) -> Option<Weights> {
    let mut acc = grads.next()?;
    for g in grads {
        acc.add_assign(&g);
    }
    Some(acc)
}

#[cfg(test)]
mod tests;
