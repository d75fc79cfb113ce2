use ndarray::Array2;
use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{trunc_normal, ParamStore};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, d_in: usize, d_out: usize) -> Self {
        // Fan-in scaled so stacked layers keep activations O(1).
        let std = INIT_STD.max(1.0 / (d_in as f64).sqrt()).min(0.5);
        Linear {
            weight: store.add(format!("{name}.weight"), trunc_normal(rng, d_in, d_out, std)),
            bias: store.add(format!("{name}.bias"), Array2::zeros((1, d_out))),
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), Array2::zeros((d_in, d_out))),
            bias: store.add(format!("{name}.bias"), Array2::zeros((1, d_out))),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: usize,
    pub shift: usize,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Array2::ones((1, d))),
            shift: store.add(format!("{name}.shift"), Array2::zeros((1, d))),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm_rows(x, LN_EPS);
        let gain = g.param(self.gain);
        let shift = g.param(self.shift);
        let y = g.mul_row(n, gain);
        g.add_row(y, shift)
    }
}

/// Multi-head self-attention returning the mixed values and the
/// head-averaged attention matrix.
#[derive(Debug, Clone, Copy)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub n_heads: usize,
    pub d_model: usize,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, d_model: usize, n_heads: usize) -> Self {
        SelfAttention {
            query: Linear::new(store, rng, &format!("{name}.query"), d_model, d_model),
            key: Linear::new(store, rng, &format!("{name}.key"), d_model, d_model),
            value: Linear::new(store, rng, &format!("{name}.value"), d_model, d_model),
            out: Linear::new(store, rng, &format!("{name}.out"), d_model, d_model),
            n_heads,
            d_model,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> (Var, Var) {
        let q = self.query.forward(g, x);
        let k = self.key.forward(g, x);
        let v = self.value.forward(g, x);
        let d_head = self.d_model / self.n_heads;
        let scale = 1.0 / (d_head as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut attn_sum: Option<Var> = None;
        for h in 0..self.n_heads {
            let (lo, hi) = (h * d_head, (h + 1) * d_head);
            let qh = g.slice_cols(q, lo, hi);
            let kh = g.slice_cols(k, lo, hi);
            let vh = g.slice_cols(v, lo, hi);
            let logits = g.matmul_t(qh, kh);
            let logits = g.scale(logits, scale);
            let attn = g.softmax_rows(logits);
            heads.push(g.matmul(attn, vh));
            attn_sum = Some(match attn_sum {
                Some(s) => g.add(s, attn),
                None => attn,
            });
        }
        let mixed = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        let out = self.out.forward(g, mixed);
        let attn_mean = g.scale(attn_sum.expect("n_heads >= 1"), 1.0 / self.n_heads as f64);
        (out, attn_mean)
    }
}

/// Two-layer GELU feed-forward block.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, d_model: usize, d_hidden: usize) -> Self {
        FeedForward {
            up: Linear::new(store, rng, &format!("{name}.up"), d_model, d_hidden),
            down: Linear::new(store, rng, &format!("{name}.down"), d_hidden, d_model),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}
