//! Time-conditioned dual-pathway score network.
//!
//! Each of the `K` layers runs two branches over the same normalized input:
//! a global multi-head self-attention branch whose head-averaged attention
//! matrix is `psi`, and a local branch that attends over the window's
//! cosine-similarity matrix and emits a row-stochastic `xi`. Both branch
//! outputs merge back into the residual stream; a zero-initialized linear
//! head maps the final stream to one score per point and channel.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{FeedForward, Graph, LayerNorm, Linear, ParamStore, SelfAttention, Var};
use crate::sde::NoiseSchedule;

/// Norm floor used by the cosine-similarity branch.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreNetConfig {
    pub layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub window: usize,
    pub d_in: usize,
    pub dropout: f64,
    /// Hidden width of the feed-forward block, as a multiple of `d_model`.
    pub ff_mult: usize,
    /// Divide the head output by the marginal std `sigma(t)`.
    pub scale_by_sigma: bool,
    /// Width of the temporal input embedding (odd). Each point is projected
    /// together with its neighbours, edges padded by repetition; 1 gives a
    /// pointwise projection.
    pub embed_kernel: usize,
    /// Diffusion time is multiplied by this before the sinusoidal features.
    /// Large values separate nearby times sharply; small ones make the
    /// network smooth in `t`, which helps when small times are rarely drawn.
    pub time_scale: f64,
    pub init_seed: u64,
}

impl Default for ScoreNetConfig {
    fn default() -> Self {
        ScoreNetConfig {
            layers: 3,
            d_model: 512,
            n_heads: 8,
            window: 100,
            d_in: 1,
            dropout: 0.0,
            ff_mult: 4,
            scale_by_sigma: true,
            embed_kernel: 1,
            time_scale: 1000.0,
            init_seed: 0,
        }
    }
}

impl ScoreNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("scorenet.layers must be >= 1".into()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "scorenet.d_model ({}) must be divisible by scorenet.n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.window < 2 || self.d_in == 0 || self.ff_mult == 0 {
            return Err(Error::Config(
                "scorenet.window must be >= 2, d_in and ff_mult >= 1".into(),
            ));
        }
        if !(self.time_scale > 0.0 && self.time_scale.is_finite()) {
            return Err(Error::Config("scorenet.time_scale must be positive".into()));
        }
        if self.embed_kernel % 2 == 0 {
            return Err(Error::Config("scorenet.embed_kernel must be odd".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("scorenet.dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-layer `N x N` row-stochastic matrices from the two branches.
#[derive(Debug, Clone, PartialEq)]
pub struct PathwayCharacteristics {
    pub psi: Vec<Array2<f64>>,
    pub xi: Vec<Array2<f64>>,
}

impl PathwayCharacteristics {
    /// Largest deviation of any row sum from 1, or of any entry below 0.
    pub fn max_stochastic_error(&self) -> f64 {
        self.psi
            .iter()
            .chain(&self.xi)
            .flat_map(|m| {
                m.rows()
                    .into_iter()
                    .map(|r| {
                        let neg = r.iter().fold(0.0f64, |a, &v| a.max(-v));
                        (r.sum() - 1.0).abs().max(neg)
                    })
                    .collect::<Vec<_>>()
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct ScoreOutput {
    pub score: Array2<f64>,
    pub chars: PathwayCharacteristics,
}

/// Graph handles produced by [`ScoreNet::forward_graph`].
#[derive(Debug, Clone)]
pub struct ScoreVars {
    pub score: Var,
    pub psi: Vec<Var>,
    pub xi: Vec<Var>,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    film: Linear,
    pre_norm: LayerNorm,
    global: SelfAttention,
    sim_proj: Linear,
    local: SelfAttention,
    xi_norm: LayerNorm,
    xi_head: Linear,
    merge: Linear,
    ff_norm: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
pub struct ScoreNet {
    config: ScoreNetConfig,
    schedule: NoiseSchedule,
    store: ParamStore,
    input: Linear,
    time_in: Linear,
    time_out: Linear,
    blocks: Vec<Block>,
    out_norm: LayerNorm,
    head: Linear,
    positions: Array2<f64>,
}

/// Sinusoidal features of a scalar position, `[sin | cos]`, width `d`.
pub fn sinusoidal_features(pos: f64, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = vec![0.0; d];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half.max(1) as f64).exp();
        out[i] = (pos * freq).sin();
        out[half + i] = (pos * freq).cos();
    }
    out
}

/// Cosine similarity of every pair of rows, norms floored at `eps`.
pub fn cosine_similarity_matrix(x: &Array2<f64>, eps: f64) -> Array2<f64> {
    let mut unit = x.clone();
    for mut row in unit.rows_mut() {
        let n = row.dot(&row).sqrt().max(eps);
        row /= n;
    }
    unit.dot(&unit.t())
}

/// Stacks each row with its `k / 2` neighbours on either side, offset-major:
/// columns `[x(i - k/2), ..., x(i), ..., x(i + k/2)]`, indices clamped to the
/// window.
pub fn unfold(x: &Array2<f64>, k: usize) -> Array2<f64> {
    if k == 1 {
        return x.clone();
    }
    let (n, d) = x.dim();
    let half = (k / 2) as isize;
    Array2::from_shape_fn((n, d * k), |(i, j)| {
        let (o, c) = (j / d, j % d);
        let src = (i as isize + o as isize - half).clamp(0, n as isize - 1) as usize;
        x[[src, c]]
    })
}

impl ScoreNet {
    pub fn new(config: ScoreNetConfig, schedule: NoiseSchedule) -> Result<Self> {
        config.validate()?;
        schedule.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let (d, n) = (config.d_model, config.window);
        let input = Linear::new(&mut store, &mut rng, "input", config.d_in * config.embed_kernel, d);
        let time_in = Linear::new(&mut store, &mut rng, "time.0", d, d);
        let time_out = Linear::new(&mut store, &mut rng, "time.1", d, d);
        let blocks = (0..config.layers)
            .map(|k| {
                let p = |s: &str| format!("layer{k}.{s}");
                Block {
                    film: Linear::zeros(&mut store, &p("film"), d, 2 * d),
                    pre_norm: LayerNorm::new(&mut store, &p("pre_norm"), d),
                    global: SelfAttention::new(&mut store, &mut rng, &p("global"), d, config.n_heads),
                    sim_proj: Linear::new(&mut store, &mut rng, &p("sim_proj"), n, d),
                    local: SelfAttention::new(&mut store, &mut rng, &p("local"), d, config.n_heads),
                    xi_norm: LayerNorm::new(&mut store, &p("xi_norm"), d),
                    xi_head: Linear::new(&mut store, &mut rng, &p("xi_head"), d, n),
                    merge: Linear::new(&mut store, &mut rng, &p("merge"), 2 * d, d),
                    ff_norm: LayerNorm::new(&mut store, &p("ff_norm"), d),
                    ff: FeedForward::new(&mut store, &mut rng, &p("ff"), d, config.ff_mult * d),
                }
            })
            .collect();
        let out_norm = LayerNorm::new(&mut store, "out_norm", d);
        let head = Linear::zeros(&mut store, "head", d, config.d_in);
        let positions = Array2::from_shape_fn((n, d), |(i, j)| sinusoidal_features(i as f64, d)[j]);
        Ok(ScoreNet {
            config,
            schedule,
            store,
            input,
            time_in,
            time_out,
            blocks,
            out_norm,
            head,
            positions,
        })
    }

    pub fn config(&self) -> &ScoreNetConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Index of the output head's weight and bias in the parameter store.
    pub fn head_params(&self) -> (usize, usize) {
        (self.head.weight, self.head.bias)
    }

    pub fn input_params(&self) -> (usize, usize) {
        (self.input.weight, self.input.bias)
    }

    /// Learned embedding of the diffusion time, `1 x d_model`.
    pub fn embed_time_graph(&self, g: &mut Graph, t: f64) -> Var {
        let feats = sinusoidal_features(self.config.time_scale * t, self.config.d_model);
        let f = g.constant(Array2::from_shape_vec((1, feats.len()), feats).expect("row"));
        let h = self.time_in.forward(g, f);
        let h = g.silu(h);
        self.time_out.forward(g, h)
    }

    pub fn embed_time(&self, t: f64) -> Vec<f64> {
        let mut g = Graph::new(&self.store);
        let v = self.embed_time_graph(&mut g, t);
        g.value(v).iter().copied().collect()
    }

    fn dropout<R: Rng + ?Sized>(&self, g: &mut Graph, x: Var, rng: Option<&mut R>) -> Var {
        let p = self.config.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let mask = Array2::from_shape_simple_fn(g.value(x).dim(), || {
                    if rng.random::<f64>() < p { 0.0 } else { keep }
                });
                let m = g.constant(mask);
                g.mul(x, m)
            }
            _ => x,
        }
    }

    fn check_shape(&self, x: &Array2<f64>) -> Result<()> {
        let want = (self.config.window, self.config.d_in);
        if x.dim() != want {
            return Err(Error::Shape(format!(
                "score network expects a {}x{} window, got {:?}",
                want.0,
                want.1,
                x.dim()
            )));
        }
        Ok(())
    }

    /// Records a forward pass on `g`. Passing `dropout_rng` enables dropout.
    pub fn forward_graph<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        xt: Var,
        t: f64,
        mut dropout_rng: Option<&mut R>,
    ) -> Result<ScoreVars> {
        self.check_shape(g.value(xt))?;
        let temb = self.embed_time_graph(g, t);
        let temb_act = g.silu(temb);

        let unfolded = g.constant(unfold(g.value(xt), self.config.embed_kernel));
        let h = self.input.forward(g, unfolded);
        let pos = g.constant(self.positions.clone());
        let h = g.add(h, pos);
        let mut h = g.add_row(h, temb);

        let d = self.config.d_model;
        let mut psi = Vec::with_capacity(self.blocks.len());
        let mut xi = Vec::with_capacity(self.blocks.len());
        for (k, b) in self.blocks.iter().enumerate() {
            let film = b.film.forward(g, temb_act);
            let gamma = g.slice_cols(film, 0, d);
            let gamma = g.add_const(gamma, 1.0);
            let beta = g.slice_cols(film, d, 2 * d);
            let hm = g.mul_row(h, gamma);
            let hm = g.add_row(hm, beta);

            let a = b.pre_norm.forward(g, hm);

            let (global_out, attn) = b.global.forward(g, a);
            let global_out = self.dropout(g, global_out, dropout_rng.as_deref_mut());

            let unit = g.normalize_rows(a, COSINE_EPS);
            let sim = g.matmul_t(unit, unit);
            let u = b.sim_proj.forward(g, sim);
            let (y, _) = b.local.forward(g, u);
            let y = self.dropout(g, y, dropout_rng.as_deref_mut());
            let local_out = g.add(u, y);
            let yn = b.xi_norm.forward(g, y);
            let xi_logits = b.xi_head.forward(g, yn);
            let xi_k = g.softmax_rows(xi_logits);

            let both = g.concat_cols(&[global_out, local_out]);
            let merged = b.merge.forward(g, both);
            let h1 = g.add(hm, merged);
            let f = b.ff_norm.forward(g, h1);
            let f = b.ff.forward(g, f);
            let f = self.dropout(g, f, dropout_rng.as_deref_mut());
            h = g.add(h1, f);

            if g.value(h).iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation { layer: k });
            }
            psi.push(attn);
            xi.push(xi_k);
        }
        let out = self.out_norm.forward(g, h);
        let mut score = self.head.forward(g, out);
        if self.config.scale_by_sigma {
            let sigma = self.schedule.marginal_params(t)?.sigma;
            score = g.scale(score, 1.0 / sigma);
        }
        if g.value(score).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation { layer: self.blocks.len() });
        }
        Ok(ScoreVars { score, psi, xi })
    }

    /// Inference-mode forward pass.
    pub fn forward(&self, xt: &Array2<f64>, t: f64) -> Result<ScoreOutput> {
        self.check_shape(xt)?;
        let mut g = Graph::new(&self.store);
        let x = g.constant(xt.clone());
        let vars = self.forward_graph::<ChaCha8Rng>(&mut g, x, t, None)?;
        Ok(ScoreOutput {
            score: g.value(vars.score).clone(),
            chars: PathwayCharacteristics {
                psi: vars.psi.iter().map(|&v| g.value(v).clone()).collect(),
                xi: vars.xi.iter().map(|&v| g.value(v).clone()).collect(),
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    pub(crate) fn tiny(window: usize, d_in: usize) -> ScoreNet {
        let cfg = ScoreNetConfig {
            layers: 2,
            d_model: 16,
            n_heads: 2,
            window,
            d_in,
            ..ScoreNetConfig::default()
        };
        ScoreNet::new(cfg, NoiseSchedule::vp()).unwrap()
    }

    fn randomize_head(net: &mut ScoreNet, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, b) = net.head_params();
        for i in [w, b] {
            let m = net.store_mut().get_mut(i);
            m.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
    }

    fn window(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.random_range(-1.5..1.5))
    }

    #[test]
    fn time_embedding_contract() {
        let net = tiny(8, 2);
        let a = net.embed_time(0.3);
        assert_eq!(a, net.embed_time(0.3));
        assert_eq!(a.len(), 16);
        let b = net.embed_time(0.31);
        assert!(a.iter().zip(&b).any(|(x, y)| x != y));
    }

    #[test]
    fn cosine_examples() {
        let same = cosine_similarity_matrix(&array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]], COSINE_EPS);
        assert!(same.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let orth = cosine_similarity_matrix(&array![[1.0, 0.0], [0.0, 3.0]], COSINE_EPS);
        assert!(orth[[0, 1]].abs() < 1e-15 && orth[[1, 0]].abs() < 1e-15);
        let m = cosine_similarity_matrix(&array![[1.0, 0.0], [1.0, 1.0]], COSINE_EPS);
        assert!((m[[0, 1]] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(m[[0, 1]], m[[1, 0]]);
        let z = cosine_similarity_matrix(&array![[0.0, 0.0], [1.0, 0.0]], COSINE_EPS);
        assert!(z.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn graph_cosine_matches_direct() {
        let x = window(6, 4, 5);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let v = g.constant(x.clone());
        let u = g.normalize_rows(v, COSINE_EPS);
        let s = g.matmul_t(u, u);
        let direct = cosine_similarity_matrix(&x, COSINE_EPS);
        assert!((g.value(s) - &direct).iter().all(|d| d.abs() < 1e-14));
    }

    #[test]
    fn forward_contract() {
        let net = tiny(8, 3);
        let out = net.forward(&window(8, 3, 1), 0.4).unwrap();
        assert_eq!(out.score.dim(), (8, 3));
        // zero-initialized head
        assert!(out.score.iter().all(|&v| v == 0.0));
        assert_eq!(out.chars.psi.len(), 2);
        assert_eq!(out.chars.xi[1].dim(), (8, 8));
        assert!(out.chars.max_stochastic_error() < 1e-5);
        assert!(matches!(net.forward(&window(7, 3, 1), 0.4), Err(Error::Shape(_))));
        assert!(ScoreNet::new(
            ScoreNetConfig { d_model: 10, n_heads: 3, ..ScoreNetConfig::default() },
            NoiseSchedule::vp()
        )
        .is_err());
    }

    #[test]
    fn channel_permutation_equivariance() {
        let mut net = tiny(8, 3);
        randomize_head(&mut net, 4);
        let x = window(8, 3, 2);
        let base = net.forward(&x, 0.6).unwrap().score;

        let perm = [2usize, 0, 1];
        let mut permuted = net.clone();
        let (wi, _) = net.input_params();
        let (wo, bo) = net.head_params();
        let w_in = net.store().get(wi).clone();
        let w_out = net.store().get(wo).clone();
        let b_out = net.store().get(bo).clone();
        let k = net.config().embed_kernel;
        for (new, &old) in perm.iter().enumerate() {
            for o in 0..k {
                permuted.store_mut().get_mut(wi).row_mut(o * 3 + new).assign(&w_in.row(o * 3 + old));
            }
            permuted.store_mut().get_mut(wo).column_mut(new).assign(&w_out.column(old));
            permuted.store_mut().get_mut(bo)[[0, new]] = b_out[[0, old]];
        }
        let xp = Array2::from_shape_fn((8, 3), |(i, c)| x[[i, perm[c]]]);
        let out = permuted.forward(&xp, 0.6).unwrap().score;
        for i in 0..8 {
            for c in 0..3 {
                assert!((out[[i, c]] - base[[i, perm[c]]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rows_stay_stochastic_across_inputs() {
        let net = tiny(10, 2);
        for seed in 0..20 {
            let x = window(10, 2, seed) * (seed as f64 + 1.0);
            let out = net.forward(&x, 0.05 + 0.04 * seed as f64).unwrap();
            assert!(out.chars.max_stochastic_error() < 1e-5);
        }
    }

    #[test]
    fn finite_difference_gradient() {
        let mut net = tiny(8, 2);
        randomize_head(&mut net, 9);
        let x = window(8, 2, 3);
        let probe = window(8, 2, 4);
        let loss_of = |net: &ScoreNet| -> (f64, crate::nn::Gradients) {
            let mut g = Graph::new(net.store());
            let xv = g.constant(x.clone());
            let vars = net.forward_graph::<ChaCha8Rng>(&mut g, xv, 0.3, None).unwrap();
            let w = g.constant(probe.clone());
            let m = g.mul(vars.score, w);
            let mut loss = g.sum_all(m);
            for (&p, &q) in vars.psi.iter().zip(&vars.xi) {
                let lq = g.ln_clamped(q, 1e-12);
                let pq = g.mul(p, lq);
                let s = g.sum_all(pq);
                loss = g.add(loss, s);
            }
            let l = g.scalar(loss);
            (l, g.backward(loss))
        };
        let (_, grads) = loss_of(&net);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut checked = 0;
        for pi in 0..net.store().len() {
            let shape = net.store().get(pi).dim();
            for _ in 0..2 {
                let (r, c) = (rng.random_range(0..shape.0), rng.random_range(0..shape.1));
                let h = 1e-5;
                let mut plus = net.clone();
                plus.store_mut().get_mut(pi)[[r, c]] += h;
                let mut minus = net.clone();
                minus.store_mut().get_mut(pi)[[r, c]] -= h;
                let numeric = (loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * h);
                let analytic = grads.params[pi].as_ref().map_or(0.0, |g| g[[r, c]]);
                let denom = numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(
                    (numeric - analytic).abs() / denom < 1e-3,
                    "{}[{r},{c}]: analytic {analytic} numeric {numeric}",
                    net.store().name(pi)
                );
                checked += 1;
            }
        }
        assert!(checked > 50);
    }
}
