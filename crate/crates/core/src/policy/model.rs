use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::vocab::PAD;
use super::PolicyError;

const LN_EPS: f64 = 1e-5;

/// Architecture hyper-parameters. `vocab_size` is fixed by the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub context: usize,
    pub init_std: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { d_model: 128, n_heads: 4, n_layers: 1, d_ff: 512, context: 512, init_std: 0.02 }
    }
}

impl PolicyConfig {
    pub fn check(&self) -> Result<(), String> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.context < 2 {
            return Err("n_layers, d_ff must be positive and context at least 2".into());
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err("init_std must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub w_qkv: Array2<f64>,
    pub b_qkv: Array1<f64>,
    pub w_o: Array2<f64>,
    pub b_o: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w_ff1: Array2<f64>,
    pub b_ff1: Array1<f64>,
    pub w_ff2: Array2<f64>,
    pub b_ff2: Array1<f64>,
}

/// All trainable tensors. Also used as the gradient container.
///
/// Flat order: tok_emb, prev_emb, pos_emb, then per layer ln1 (g, b), w_qkv,
/// b_qkv, w_o, b_o, ln2 (g, b), w_ff1, b_ff1, w_ff2, b_ff2, then lnf (g, b),
/// w_out, b_out. Matrices are row-major with shape [in, out].
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub tok_emb: Array2<f64>,
    /// Embedding of the previous token, added at each position.
    pub prev_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<Layer>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

impl Weights {
    pub fn zeros(cfg: &PolicyConfig, vocab: usize) -> Self {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let m = |r, c| Array2::zeros((r, c));
        let v = |n| Array1::zeros(n);
        Self {
            tok_emb: m(vocab, d),
            prev_emb: m(vocab, d),
            pos_emb: m(cfg.context, d),
            layers: (0..cfg.n_layers)
                .map(|_| Layer {
                    ln1_g: v(d),
                    ln1_b: v(d),
                    w_qkv: m(d, 3 * d),
                    b_qkv: v(3 * d),
                    w_o: m(d, d),
                    b_o: v(d),
                    ln2_g: v(d),
                    ln2_b: v(d),
                    w_ff1: m(d, f),
                    b_ff1: v(f),
                    w_ff2: m(f, d),
                    b_ff2: v(d),
                })
                .collect(),
            lnf_g: v(d),
            lnf_b: v(d),
            w_out: m(d, vocab),
            b_out: v(vocab),
        }
    }

    /// Gaussian init, unit gains, zero biases; every value is exactly
    /// representable as f32.
    pub fn init(cfg: &PolicyConfig, vocab: usize, rng: &mut impl Rng) -> Self {
        let mut w = Self::zeros(cfg, vocab);
        let std = cfg.init_std;
        let resid = std / (2.0 * cfg.n_layers as f64).sqrt();
        let mut fill = |a: &mut [f64], sd: f64| {
            let n = Normal::new(0.0, sd).expect("positive std");
            for x in a {
                *x = n.sample(rng) as f32 as f64;
            }
        };
        fill(w.tok_emb.as_slice_mut().unwrap(), std);
        fill(w.prev_emb.as_slice_mut().unwrap(), std);
        fill(w.pos_emb.as_slice_mut().unwrap(), std);
        for l in &mut w.layers {
            l.ln1_g.fill(1.0);
            l.ln2_g.fill(1.0);
            fill(l.w_qkv.as_slice_mut().unwrap(), std);
            fill(l.w_o.as_slice_mut().unwrap(), resid);
            fill(l.w_ff1.as_slice_mut().unwrap(), std);
            fill(l.w_ff2.as_slice_mut().unwrap(), resid);
        }
        w.lnf_g.fill(1.0);
        fill(w.w_out.as_slice_mut().unwrap(), std);
        w
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![
            self.tok_emb.as_slice().unwrap(),
            self.prev_emb.as_slice().unwrap(),
            self.pos_emb.as_slice().unwrap(),
        ];
        for l in &self.layers {
            v.extend([
                l.ln1_g.as_slice().unwrap(),
                l.ln1_b.as_slice().unwrap(),
                l.w_qkv.as_slice().unwrap(),
                l.b_qkv.as_slice().unwrap(),
                l.w_o.as_slice().unwrap(),
                l.b_o.as_slice().unwrap(),
                l.ln2_g.as_slice().unwrap(),
                l.ln2_b.as_slice().unwrap(),
                l.w_ff1.as_slice().unwrap(),
                l.b_ff1.as_slice().unwrap(),
                l.w_ff2.as_slice().unwrap(),
                l.b_ff2.as_slice().unwrap(),
            ]);
        }
        v.extend([
            self.lnf_g.as_slice().unwrap(),
            self.lnf_b.as_slice().unwrap(),
            self.w_out.as_slice().unwrap(),
            self.b_out.as_slice().unwrap(),
        ]);
        v
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![
            self.tok_emb.as_slice_mut().unwrap(),
            self.prev_emb.as_slice_mut().unwrap(),
            self.pos_emb.as_slice_mut().unwrap(),
        ];
        for l in &mut self.layers {
            v.extend([
                l.ln1_g.as_slice_mut().unwrap(),
                l.ln1_b.as_slice_mut().unwrap(),
                l.w_qkv.as_slice_mut().unwrap(),
                l.b_qkv.as_slice_mut().unwrap(),
                l.w_o.as_slice_mut().unwrap(),
                l.b_o.as_slice_mut().unwrap(),
                l.ln2_g.as_slice_mut().unwrap(),
                l.ln2_b.as_slice_mut().unwrap(),
                l.w_ff1.as_slice_mut().unwrap(),
                l.b_ff1.as_slice_mut().unwrap(),
                l.w_ff2.as_slice_mut().unwrap(),
                l.b_ff2.as_slice_mut().unwrap(),
            ]);
        }
        v.extend([
            self.lnf_g.as_slice_mut().unwrap(),
            self.lnf_b.as_slice_mut().unwrap(),
            self.w_out.as_slice_mut().unwrap(),
            self.b_out.as_slice_mut().unwrap(),
        ]);
        v
    }

    pub fn n_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<(), PolicyError> {
        if flat.len() != self.n_params() {
            return Err(PolicyError::Shape(format!("expected {} values, got {}", self.n_params(), flat.len())));
        }
        let mut off = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        }
        Ok(())
    }

    pub fn get(&self, i: usize) -> f64 {
        let mut i = i;
        for s in self.slices() {
            if i < s.len() {
                return s[i];
            }
            i -= s.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set(&mut self, i: usize, x: f64) {
        let mut i = i;
        for s in self.slices_mut() {
            if i < s.len() {
                s[i] = x;
                return;
            }
            i -= s.len();
        }
        panic!("parameter index out of range")
    }

    pub fn add_assign(&mut self, o: &Weights) {
        for (a, b) in self.slices_mut().into_iter().zip(o.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for a in self.slices_mut() {
            for x in a {
                *x *= k;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.slices().iter().flat_map(|s| s.iter()).map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    /// Rounds every value to the nearest f32.
    pub fn quantize(&mut self) {
        for a in self.slices_mut() {
            for x in a {
                *x = *x as f32 as f64;
            }
        }
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / n;
        row -= mean;
        let var = row.dot(&row) / n;
        *r = 1.0 / (var + LN_EPS).sqrt();
        row *= *r;
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_back(dy: &Array2<f64>, c: &LnCache, g: &Array1<f64>, dg: &mut Array1<f64>, db: &mut Array1<f64>) -> Array2<f64> {
    *dg += &(dy * &c.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let dxhat = dy * g;
    let n = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for ((mut out, dh), (xh, r)) in dx
        .rows_mut()
        .into_iter()
        .zip(dxhat.rows())
        .zip(c.xhat.rows().into_iter().zip(c.rstd.iter()))
    {
        let m1 = dh.sum() / n;
        let m2 = dh.dot(&xh) / n;
        Zip::from(&mut out).and(&dh).and(&xh).for_each(|o, &d, &x| *o = r * (d - m1 - x * m2));
    }
    dx
}

pub(crate) fn ln_vec(x: ArrayView1<f64>, g: &Array1<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let c = &x - mean;
    let var = c.dot(&c) / n;
    let r = 1.0 / (var + LN_EPS).sqrt();
    c * r * g + b
}

pub(crate) fn gelu_vec(x: &Array1<f64>) -> Array1<f64> {
    x.mapv(gelu)
}

struct LayerCache {
    ln1: LnCache,
    h1: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    att: Array2<f64>,
    ln2: LnCache,
    h2: Array2<f64>,
    u: Array2<f64>,
    gu: Array2<f64>,
}

/// Activations kept for the backward pass.
pub struct Trace {
    ids: Vec<u32>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    hf: Array2<f64>,
    /// First position whose output is scored.
    first: usize,
}

impl Trace {
    pub fn n_positions(&self) -> usize {
        self.ids.len()
    }
}

pub(crate) fn prev_ids(ids: &[u32]) -> impl Iterator<Item = u32> + '_ {
    std::iter::once(PAD).chain(ids.iter().copied()).take(ids.len())
}

impl Weights {
    pub fn vocab_size(&self) -> usize {
        self.tok_emb.nrows()
    }

    fn embed(&self, ids: &[u32]) -> Array2<f64> {
        let d = self.tok_emb.ncols();
        let mut x = Array2::zeros((ids.len(), d));
        for (t, (id, pid)) in ids.iter().zip(prev_ids(ids)).enumerate() {
            let mut row = x.row_mut(t);
            row += &self.tok_emb.row(*id as usize);
            row += &self.prev_emb.row(pid as usize);
            row += &self.pos_emb.row(t);
        }
        x
    }

    /// Teacher-forced forward over `prompt ++ target[..n-1]`; returns logits
    /// for the n positions that predict `target`.
    pub fn forward(
        &self,
        cfg: &PolicyConfig,
        prompt: &[u32],
        target: &[u32],
    ) -> Result<(Array2<f64>, Trace), PolicyError> {
        if prompt.is_empty() || target.is_empty() {
            return Err(PolicyError::Shape("prompt and target must be non-empty".into()));
        }
        let total = prompt.len() + target.len() - 1;
        if total > cfg.context {
            return Err(PolicyError::Context { len: total, context: cfg.context });
        }
        let v = self.vocab_size() as u32;
        if let Some(&bad) = prompt.iter().chain(target).find(|&&i| i >= v) {
            return Err(PolicyError::Shape(format!("token id {bad} outside vocabulary of {v}")));
        }
        let ids: Vec<u32> = prompt.iter().chain(&target[..target.len() - 1]).copied().collect();
        let (d, nh) = (cfg.d_model, cfg.n_heads);
        let dh = d / nh;
        let scale = 1.0 / (dh as f64).sqrt();
        let t_len = ids.len();
        let mut x = self.embed(&ids);
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (h1, ln1) = layer_norm(&x, &l.ln1_g, &l.ln1_b);
            let qkv = h1.dot(&l.w_qkv) + &l.b_qkv;
            let mut att = Array2::zeros((t_len, d));
            let mut probs = Vec::with_capacity(nh);
            for h in 0..nh {
                let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
                let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
                let vv = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let mut p = q.dot(&k.t()) * scale;
                for (i, mut row) in p.rows_mut().into_iter().enumerate() {
                    let m = row.slice(s![..=i]).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let mut z = 0.0;
                    for (j, e) in row.iter_mut().enumerate() {
                        if j <= i {
                            *e = (*e - m).exp();
                            z += *e;
                        } else {
                            *e = 0.0;
                        }
                    }
                    row /= z;
                }
                att.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&p.dot(&vv));
                probs.push(p);
            }
            x = x + att.dot(&l.w_o) + &l.b_o;
            let (h2, ln2) = layer_norm(&x, &l.ln2_g, &l.ln2_b);
            let u = h2.dot(&l.w_ff1) + &l.b_ff1;
            let gu = u.mapv(gelu);
            x = x + gu.dot(&l.w_ff2) + &l.b_ff2;
            layers.push(LayerCache { ln1, h1, qkv, probs, att, ln2, h2, u, gu });
        }
        let (hf, lnf) = layer_norm(&x, &self.lnf_g, &self.lnf_b);
        let first = prompt.len() - 1;
        let logits = hf.slice(s![first.., ..]).dot(&self.w_out) + &self.b_out;
        Ok((logits, Trace { ids, layers, lnf, hf, first }))
    }

    /// Accumulates into `grad` the gradient of a scalar loss whose gradient
    /// with respect to the scored logits is `dlogits`.
    pub fn backward(&self, cfg: &PolicyConfig, tr: &Trace, dlogits: ArrayView2<f64>, grad: &mut Weights) {
        let (d, nh) = (cfg.d_model, cfg.n_heads);
        let dh = d / nh;
        let scale = 1.0 / (dh as f64).sqrt();
        let t_len = tr.ids.len();
        let hf_sel = tr.hf.slice(s![tr.first.., ..]);
        grad.w_out += &hf_sel.t().dot(&dlogits);
        grad.b_out += &dlogits.sum_axis(Axis(0));
        let mut dhf = Array2::zeros((t_len, d));
        dhf.slice_mut(s![tr.first.., ..]).assign(&dlogits.dot(&self.w_out.t()));
        let mut dx = layer_norm_back(&dhf, &tr.lnf, &self.lnf_g, &mut grad.lnf_g, &mut grad.lnf_b);

        for (li, l) in self.layers.iter().enumerate().rev() {
            let c = &tr.layers[li];
            let gl = &mut grad.layers[li];
            // feed-forward
            gl.b_ff2 += &dx.sum_axis(Axis(0));
            gl.w_ff2 += &c.gu.t().dot(&dx);
            let mut du = dx.dot(&l.w_ff2.t());
            Zip::from(&mut du).and(&c.u).for_each(|g, &u| *g *= gelu_grad(u));
            gl.w_ff1 += &c.h2.t().dot(&du);
            gl.b_ff1 += &du.sum_axis(Axis(0));
            let dh2 = du.dot(&l.w_ff1.t());
            dx = dx + layer_norm_back(&dh2, &c.ln2, &l.ln2_g, &mut gl.ln2_g, &mut gl.ln2_b);
            // attention
            gl.b_o += &dx.sum_axis(Axis(0));
            gl.w_o += &c.att.t().dot(&dx);
            let datt = dx.dot(&l.w_o.t());
            let mut dqkv = Array2::zeros((t_len, 3 * d));
            for h in 0..nh {
                let p = &c.probs[h];
                let q = c.qkv.slice(s![.., h * dh..(h + 1) * dh]);
                let k = c.qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
                let vv = c.qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let dout = datt.slice(s![.., h * dh..(h + 1) * dh]);
                let dv = p.t().dot(&dout);
                let dp = dout.dot(&vv.t());
                let mut ds = dp;
                for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let dot = drow.dot(&prow);
                    Zip::from(&mut drow).and(&prow).for_each(|g, &pp| *g = pp * (*g - dot) * scale);
                }
                dqkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&ds.dot(&k));
                dqkv.slice_mut(s![.., d + h * dh..d + (h + 1) * dh]).assign(&ds.t().dot(&q));
                dqkv.slice_mut(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]).assign(&dv);
            }
            gl.w_qkv += &c.h1.t().dot(&dqkv);
            gl.b_qkv += &dqkv.sum_axis(Axis(0));
            let dh1 = dqkv.dot(&l.w_qkv.t());
            dx = dx + layer_norm_back(&dh1, &c.ln1, &l.ln1_g, &mut gl.ln1_g, &mut gl.ln1_b);
        }
        for (t, (id, pid)) in tr.ids.iter().zip(prev_ids(&tr.ids)).enumerate() {
            let row = dx.row(t);
            let mut a = grad.tok_emb.row_mut(*id as usize);
            a += &row;
            let mut b = grad.prev_emb.row_mut(pid as usize);
            b += &row;
            let mut c = grad.pos_emb.row_mut(t);
            c += &row;
        }
    }
}

/// Row-wise log-softmax.
pub fn log_softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let z = row.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
        row -= z;
    }
    out
}

pub fn log_softmax_vec(logits: ArrayView1<f64>) -> Array1<f64> {
    let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let z = logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
    &logits - z
}
