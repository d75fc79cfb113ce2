//! Training losses: denoising score matching, volume minimization around a
//! fixed center, contextual information gain between the two pathways, and
//! reconstruction, combined into one objective.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, Var};
use crate::scorenet::{PathwayCharacteristics, ScoreNet, ScoreVars};
use crate::sde::{NoiseSchedule, PerturbedBatch};

/// Floor applied to probabilities before taking logs.
pub const EPS_KL: f64 = 1e-12;
/// Minimum magnitude of every center coordinate.
pub const CENTER_MIN_ABS: f64 = 0.1;
/// Row-sum tolerance accepted by [`contextual_gain`].
pub const STOCHASTIC_TOL: f64 = 1e-5;

/// Logged values of one loss evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub dsm: f64,
    pub rec: f64,
    pub vm: f64,
    pub gamma: f64,
    pub total: f64,
}

/// Fixed center of the score vectors, one row per window position.
#[derive(Debug, Clone, PartialEq)]
pub struct Center {
    pub c: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaMode {
    /// Alternate: phase A raises the gain through the local branch with the
    /// global matrices frozen, phase B lowers it through the global branch
    /// with the local matrices frozen.
    Minimax,
    /// Single objective subtracting the gain with gradients through both.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    A,
    B,
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DsmWeighting {
    /// Multiply the per-window DSM term by `sigma(t)^2`.
    SigmaSquared,
    None,
}

/// Which terms take part in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossFlags {
    pub dsm: bool,
    pub rec: bool,
    pub vm: bool,
    pub gamma: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        LossFlags { dsm: true, rec: true, vm: true, gamma: true }
    }
}

/// Loss weights and switches. `lambda_rec`/`lambda_vm` of `None` mean
/// `scale / N` for window length `N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_rec: Option<f64>,
    pub lambda_vm: Option<f64>,
    /// Proportionality constant for the `1/N` defaults.
    pub inverse_n_scale: f64,
    pub lambda_gamma: f64,
    pub gamma_mode: GammaMode,
    pub dsm_weighting: DsmWeighting,
    pub enable: LossFlags,
    /// Reconstruction is only scored for windows perturbed to `t <= rec_t_max`;
    /// `None` uses the solver's entry time.
    pub rec_t_max: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_rec: None,
            lambda_vm: None,
            inverse_n_scale: 1.0,
            lambda_gamma: 3.0,
            gamma_mode: GammaMode::Minimax,
            dsm_weighting: DsmWeighting::SigmaSquared,
            enable: LossFlags::default(),
            rec_t_max: None,
        }
    }
}

/// Effective weights `(lambda_rec, lambda_vm, lambda_gamma)` after flags.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub dsm: f64,
    pub rec: f64,
    pub vm: f64,
    pub gamma: f64,
}

impl LossConfig {
    pub fn weights(&self, window: usize) -> LossWeights {
        let inv_n = self.inverse_n_scale / window as f64;
        let on = |f: bool, v: f64| if f { v } else { 0.0 };
        LossWeights {
            dsm: on(self.enable.dsm, 1.0),
            rec: on(self.enable.rec, self.lambda_rec.unwrap_or(inv_n)),
            vm: on(self.enable.vm, self.lambda_vm.unwrap_or(inv_n)),
            gamma: on(self.enable.gamma, self.lambda_gamma),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |v: Option<f64>| v.is_some_and(|x| !(x >= 0.0));
        if bad(self.lambda_rec) || bad(self.lambda_vm) || !(self.lambda_gamma >= 0.0) || !(self.inverse_n_scale >= 0.0) {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// `dsm + l1 * rec + l2 * vm - l3 * gamma`.
pub fn total_loss(dsm: f64, rec: f64, vm: f64, gamma: f64, w: &LossWeights) -> f64 {
    w.dsm * dsm + w.rec * rec + w.vm * vm - w.gamma * gamma
}

fn same_shape(a: &Array2<f64>, b: &Array2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Regression target `-(x(t) - alpha x(0)) / sigma^2 = -noise / sigma`.
pub fn dsm_target(batch: &PerturbedBatch) -> Result<Array2<f64>> {
    let sigma = batch.marginal.sigma;
    if !(sigma > 0.0) {
        return Err(Error::InvalidInput("DSM target undefined for sigma = 0".into()));
    }
    Ok(&batch.noise * (-1.0 / sigma))
}

/// `(1 / 2N) * sum_i ||score_i - target_i||^2`.
pub fn dsm_loss(score: &Array2<f64>, batch: &PerturbedBatch) -> Result<f64> {
    same_shape(score, &batch.xt, "dsm score")?;
    let target = dsm_target(batch)?;
    let n = score.nrows() as f64;
    Ok((score - &target).mapv(|v| v * v).sum() / (2.0 * n))
}

fn row_sq_dist(a: &Array2<f64>, b: &Array2<f64>) -> Vec<f64> {
    (a - b).mapv(|v| v * v).sum_axis(Axis(1)).to_vec()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Per-point squared distance of score rows to center rows, and the mean.
pub fn vm_loss(score: &Array2<f64>, center: &Center) -> Result<(Vec<f64>, f64)> {
    same_shape(score, &center.c, "vm score/center")?;
    let per = row_sq_dist(score, &center.c);
    let m = mean(&per);
    Ok((per, m))
}

/// Per-point squared reconstruction error, and the mean.
pub fn rec_loss(x0: &Array2<f64>, x_hat: &Array2<f64>) -> Result<(Vec<f64>, f64)> {
    same_shape(x0, x_hat, "rec")?;
    let per = row_sq_dist(x_hat, x0);
    let m = mean(&per);
    Ok((per, m))
}

fn kl_rows(p: &Array2<f64>, q: &Array2<f64>) -> Vec<f64> {
    p.rows()
        .into_iter()
        .zip(q.rows())
        .map(|(pr, qr)| {
            pr.iter()
                .zip(qr.iter())
                .map(|(&a, &b)| {
                    let a = a.max(EPS_KL);
                    let b = b.max(EPS_KL);
                    a * (a.ln() - b.ln())
                })
                .sum()
        })
        .collect()
}

/// Per-point symmetric KL between local and global rows, averaged over layers.
pub fn contextual_gain(chars: &PathwayCharacteristics) -> Result<Vec<f64>> {
    if chars.psi.is_empty() || chars.psi.len() != chars.xi.len() {
        return Err(Error::Shape(format!(
            "{} global vs {} local matrices",
            chars.psi.len(),
            chars.xi.len()
        )));
    }
    let err = chars.max_stochastic_error();
    if err > STOCHASTIC_TOL {
        return Err(Error::InvalidInput(format!(
            "characteristic rows are not probability vectors (error {err:.3e})"
        )));
    }
    let n = chars.psi[0].nrows();
    let mut gamma = vec![0.0; n];
    for (psi, xi) in chars.psi.iter().zip(&chars.xi) {
        same_shape(psi, xi, "psi/xi")?;
        for (g, (a, b)) in gamma.iter_mut().zip(kl_rows(xi, psi).into_iter().zip(kl_rows(psi, xi))) {
            *g += a + b;
        }
    }
    let k = chars.psi.len() as f64;
    Ok(gamma.into_iter().map(|g| g / k).collect())
}

/// Graph form of [`contextual_gain`]; returns an `N x 1` column.
pub fn gamma_graph(g: &mut Graph, psi: &[Var], xi: &[Var]) -> Var {
    let mut acc: Option<Var> = None;
    for (&p, &q) in psi.iter().zip(xi) {
        let lp = g.ln_clamped(p, EPS_KL);
        let lq = g.ln_clamped(q, EPS_KL);
        let diff = g.sub(lq, lp);
        // (q - p) * (ln q - ln p) summed over a row = KL(q||p) + KL(p||q)
        let dp = g.sub(q, p);
        let prod = g.mul(dp, diff);
        let per = g.row_sums(prod);
        acc = Some(match acc {
            Some(a) => g.add(a, per),
            None => per,
        });
    }
    let acc = acc.expect("at least one layer");
    g.scale(acc, 1.0 / psi.len() as f64)
}

/// One-step denoised estimate `x_hat(0) = (x(t) + sigma^2 * score) / alpha`.
pub fn denoised_estimate(g: &mut Graph, xt: Var, score: Var, alpha: f64, sigma: f64) -> Var {
    let s = g.scale(score, sigma * sigma);
    let sum = g.add(xt, s);
    g.scale(sum, 1.0 / alpha)
}

/// Mean score over fresh perturbations of the given windows, with every
/// coordinate pushed to magnitude at least [`CENTER_MIN_ABS`].
pub fn init_center<R: Rng + ?Sized>(
    model: &ScoreNet,
    windows: &[Array2<f64>],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Center> {
    let first = windows.first().ok_or_else(|| Error::InvalidInput("no training windows for center".into()))?;
    let mut sum = Array2::<f64>::zeros(first.dim());
    for x0 in windows {
        let t = schedule.sample_time(rng);
        let noise = Array2::from_shape_simple_fn(x0.dim(), || rng.sample::<f64, _>(StandardNormal));
        let batch = schedule.perturb(x0, t, &noise)?;
        let out = model.forward(&batch.xt, t)?;
        sum += &out.score;
    }
    let mut c = sum / windows.len() as f64;
    c.mapv_inplace(|v| if v.abs() < CENTER_MIN_ABS { CENTER_MIN_ABS.copysign(if v == 0.0 { 1.0 } else { v }) } else { v });
    Ok(Center { c })
}

/// Result of recording one window's objective on a graph.
pub struct WindowObjective {
    pub loss: Var,
    pub parts: LossComponents,
    pub vars: ScoreVars,
}

/// Records the training objective for one perturbed window.
///
/// `rec_t_max` bounds the times at which the reconstruction term is active.
pub fn window_objective(
    g: &mut Graph,
    vars: ScoreVars,
    batch: &PerturbedBatch,
    center: &Center,
    cfg: &LossConfig,
    rec_t_max: f64,
    phase: Phase,
) -> Result<WindowObjective> {
    let n = batch.x0.nrows();
    let w = cfg.weights(n);
    let (alpha, sigma) = (batch.marginal.alpha, batch.marginal.sigma);
    let mut terms: Vec<Var> = Vec::new();
    let mut parts = LossComponents::default();

    if w.dsm > 0.0 {
        let target = g.constant(dsm_target(batch)?);
        let diff = g.sub(vars.score, target);
        let sq = g.mul(diff, diff);
        let s = g.sum_all(sq);
        let lam = match cfg.dsm_weighting {
            DsmWeighting::SigmaSquared => sigma * sigma,
            DsmWeighting::None => 1.0,
        };
        let dsm = g.scale(s, lam / (2.0 * n as f64));
        parts.dsm = g.scalar(dsm);
        terms.push(g.scale(dsm, w.dsm));
    }
    if w.rec > 0.0 && batch.t <= rec_t_max {
        let xt = g.constant(batch.xt.clone());
        let x_hat = denoised_estimate(g, xt, vars.score, alpha, sigma);
        let x0 = g.constant(batch.x0.clone());
        let diff = g.sub(x_hat, x0);
        let sq = g.mul(diff, diff);
        let rec = g.mean_all(sq);
        let rec = g.scale(rec, batch.x0.ncols() as f64);
        parts.rec = g.scalar(rec);
        terms.push(g.scale(rec, w.rec));
    }
    if w.vm > 0.0 {
        let c = g.constant(center.c.clone());
        let diff = g.sub(vars.score, c);
        let sq = g.mul(diff, diff);
        let vm = g.mean_all(sq);
        let vm = g.scale(vm, batch.x0.ncols() as f64);
        parts.vm = g.scalar(vm);
        terms.push(g.scale(vm, w.vm));
    }
    if w.gamma > 0.0 {
        let (psi, xi): (Vec<Var>, Vec<Var>) = match phase {
            Phase::A => (vars.psi.iter().map(|&p| g.detach(p)).collect(), vars.xi.clone()),
            Phase::B => (vars.psi.clone(), vars.xi.iter().map(|&q| g.detach(q)).collect()),
            Phase::Literal => (vars.psi.clone(), vars.xi.clone()),
        };
        let per_point = gamma_graph(g, &psi, &xi);
        let gamma = g.mean_all(per_point);
        parts.gamma = g.scalar(gamma);
        let sign = if phase == Phase::B { 1.0 } else { -1.0 };
        terms.push(g.scale(gamma, sign * w.gamma));
    }
    parts.total = total_loss(parts.dsm, parts.rec, parts.vm, parts.gamma, &w);

    let loss = match terms.split_first() {
        Some((&first, rest)) => rest.iter().fold(first, |acc, &t| g.add(acc, t)),
        None => {
            let z = g.constant(Array2::zeros((1, 1)));
            g.scale(z, 0.0)
        }
    };
    Ok(WindowObjective { loss, parts, vars })
}
