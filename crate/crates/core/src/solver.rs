//! Deterministic reconstruction through the probability-flow ODE, integrated
//! backwards in time with an adaptive Dormand–Prince 5(4) pair.

use ndarray::{Array2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scorenet::{ScoreNet, ScoreOutput};
use crate::sde::{NoiseSchedule, T_MAX};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub t_rec: f64,
    pub t_end: f64,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { t_rec: 0.5, t_end: 1e-3, rtol: 1e-5, atol: 1e-5, max_steps: 10_000 }
    }
}

impl SolverConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if !(self.t_end >= schedule.t_eps) || !(self.t_end < self.t_rec) || !(self.t_rec <= T_MAX) {
            return Err(Error::Config(format!(
                "solver needs t_eps <= t_end < t_rec <= 1, got t_end={} t_rec={}",
                self.t_end, self.t_rec
            )));
        }
        if !(self.rtol > 0.0) || !(self.atol > 0.0) {
            return Err(Error::Config("solver tolerances must be > 0".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("solver.max_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// `f(x, t) - g(t)^2 / 2 * score`.
pub fn flow_rhs(schedule: &NoiseSchedule, x: &Array2<f64>, t: f64, score: &Array2<f64>) -> Result<Array2<f64>> {
    let (mut f, g) = schedule.drift_diffusion(x, t)?;
    let half_g2 = 0.5 * g * g;
    Zip::from(&mut f).and(score).for_each(|f, &s| *f -= half_g2 * s);
    Ok(f)
}

/// Probability-flow right-hand side with the network score.
pub fn ode_rhs(x: &Array2<f64>, t: f64, model: &ScoreNet) -> Result<Array2<f64>> {
    let out = model.forward(x, t)?;
    if out.score.iter().any(|v| !v.is_finite()) {
        return Err(Error::Solver { t, reason: "non-finite model output".into() });
    }
    flow_rhs(model.schedule(), x, t, &out.score)
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [&[f64]; 6] = [
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
    &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// Difference between the fifth- and fourth-order weights.
const E: [f64; 7] = [
    -71.0 / 57600.0,
    0.0,
    71.0 / 16695.0,
    -71.0 / 1920.0,
    17253.0 / 339200.0,
    -22.0 / 525.0,
    1.0 / 40.0,
];
const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;

/// Outcome of one integration.
#[derive(Debug, Clone)]
pub struct Integration {
    pub state: Array2<f64>,
    pub n_steps: usize,
    pub n_rejected: usize,
}

fn rms_norm(err: &Array2<f64>, y0: &Array2<f64>, y1: &Array2<f64>, rtol: f64, atol: f64) -> f64 {
    let mut acc = 0.0;
    Zip::from(err).and(y0).and(y1).for_each(|&e, &a, &b| {
        let sc = atol + rtol * a.abs().max(b.abs());
        acc += (e / sc).powi(2);
    });
    (acc / err.len().max(1) as f64).sqrt()
}

fn check_finite(x: &Array2<f64>, t: f64) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Solver { t, reason: "non-finite state".into() })
    }
}

/// Integrates `dy/dt = rhs(y, t)` from `t0` to `t1` (either direction).
pub fn integrate<F>(mut rhs: F, y0: &Array2<f64>, t0: f64, t1: f64, cfg: &SolverConfig) -> Result<Integration>
where
    F: FnMut(&Array2<f64>, f64) -> Result<Array2<f64>>,
{
    check_finite(y0, t0)?;
    let mut y = y0.clone();
    if t0 == t1 {
        return Ok(Integration { state: y, n_steps: 0, n_rejected: 0 });
    }
    let dir = (t1 - t0).signum();
    let (rtol, atol) = (cfg.rtol, cfg.atol);
    let mut t = t0;
    let mut f = rhs(&y, t)?;
    check_finite(&f, t)?;

    // Initial step guess from the local scale of y and f, refined by one probe.
    let span = (t1 - t0).abs();
    let scale = y.mapv(|v| atol + rtol * v.abs());
    let d0 = (Zip::from(&y).and(&scale).fold(0.0, |a, &v, &s| a + (v / s).powi(2)) / y.len() as f64).sqrt();
    let d1 = (Zip::from(&f).and(&scale).fold(0.0, |a, &v, &s| a + (v / s).powi(2)) / y.len() as f64).sqrt();
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 }.min(span);
    let y_probe = &y + &(&f * (dir * h0));
    let f_probe = rhs(&y_probe, t + dir * h0)?;
    let d2 = (Zip::from(&f_probe).and(&f).and(&scale).fold(0.0, |a, &p, &q, &s| a + ((p - q) / s).powi(2))
        / y.len() as f64)
        .sqrt()
        / h0;
    let h1 = if d1 <= 1e-15 && d2 <= 1e-15 { (h0 * 1e-3).max(1e-6) } else { (0.01 / d1.max(d2)).powf(0.2) };
    let mut h = (100.0 * h0).min(h1).min(span);

    let mut n_steps = 0;
    let mut n_rejected = 0;
    let mut k: Vec<Array2<f64>> = Vec::with_capacity(7);
    while (t1 - t) * dir > 0.0 {
        let min_h = 10.0 * f64::EPSILON * t.abs().max(1e-300);
        if h < min_h {
            return Err(Error::Solver { t, reason: "step size underflow".into() });
        }
        if n_steps >= cfg.max_steps {
            return Err(Error::Solver { t, reason: format!("exceeded {} steps", cfg.max_steps) });
        }
        let mut last = false;
        if h >= (t1 - t).abs() {
            h = (t1 - t).abs();
            last = true;
        }
        let hs = dir * h;
        k.clear();
        k.push(f.clone());
        for (i, row) in A.iter().enumerate() {
            let mut yi = y.clone();
            for (j, &a) in row.iter().enumerate() {
                if a != 0.0 {
                    yi.scaled_add(hs * a, &k[j]);
                }
            }
            let ti = if i == 5 { t + hs } else { t + C[i] * hs };
            if i == 5 {
                // Final stage is the fifth-order solution (FSAL).
                check_finite(&yi, ti)?;
                let fi = rhs(&yi, ti)?;
                k.push(fi);
                let mut err = Array2::<f64>::zeros(y.dim());
                for (j, &e) in E.iter().enumerate() {
                    if e != 0.0 {
                        err.scaled_add(hs * e, &k[j]);
                    }
                }
                let en = rms_norm(&err, &y, &yi, rtol, atol);
                if en.is_nan() {
                    return Err(Error::Solver { t, reason: "non-finite error estimate".into() });
                }
                if en <= 1.0 {
                    let factor = if en == 0.0 { MAX_FACTOR } else { (SAFETY * en.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR) };
                    t = if last { t1 } else { t + hs };
                    y = yi;
                    f = k.pop().expect("seven stages");
                    n_steps += 1;
                    h *= factor;
                } else {
                    n_rejected += 1;
                    h *= (SAFETY * en.powf(-0.2)).clamp(MIN_FACTOR, 1.0);
                }
                break;
            }
            let fi = rhs(&yi, ti)?;
            k.push(fi);
        }
    }
    Ok(Integration { state: y, n_steps, n_rejected })
}

/// Terminal state and intermediate products of one reconstruction.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    /// Perturbed input at `t_rec`.
    pub xt: Array2<f64>,
    pub x_hat: Array2<f64>,
    pub n_steps: usize,
}

/// Perturbs `x0` to `t_rec` with the given noise and integrates back to
/// `t_end` using an arbitrary score function.
pub fn reconstruct_with<S>(
    x0: &Array2<f64>,
    noise: &Array2<f64>,
    schedule: &NoiseSchedule,
    cfg: &SolverConfig,
    mut score: S,
) -> Result<Reconstruction>
where
    S: FnMut(&Array2<f64>, f64) -> Result<Array2<f64>>,
{
    let batch = schedule.perturb(x0, cfg.t_rec, noise)?;
    let run = integrate(
        |x, t| {
            let s = score(x, t)?;
            flow_rhs(schedule, x, t, &s)
        },
        &batch.xt,
        cfg.t_rec,
        cfg.t_end,
        cfg,
    )?;
    Ok(Reconstruction { xt: batch.xt, x_hat: run.state, n_steps: run.n_steps })
}

/// Draws one noise matrix for the window from `rng`.
pub fn draw_noise<R: Rng + ?Sized>(rng: &mut R, dim: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(dim, || rng.sample::<f64, _>(StandardNormal))
}

/// Reconstruction with the network score. Also returns the network output on
/// the perturbed input at `t_rec`, which scoring reuses.
pub fn reconstruct(
    x0: &Array2<f64>,
    model: &ScoreNet,
    cfg: &SolverConfig,
    noise: &Array2<f64>,
) -> Result<(Reconstruction, ScoreOutput)> {
    let rec = reconstruct_with(x0, noise, model.schedule(), cfg, |x, t| {
        let s = model.forward(x, t)?.score;
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Solver { t, reason: "non-finite model output".into() });
        }
        Ok(s)
    })?;
    let at_rec = model.forward(&rec.xt, cfg.t_rec)?;
    Ok((rec, at_rec))
}

/// Exact marginal score at time `t` when the data are `N(mu, s^2)` in every
/// coordinate. Useful as a reference for the learned score.
pub fn gaussian_score(sched: &NoiseSchedule, mu: f64, s: f64) -> impl Fn(&Array2<f64>, f64) -> Result<Array2<f64>> + '_ {
    move |x, t| {
        let m = sched.marginal_params(t)?;
        let var = m.alpha * m.alpha * s * s + m.sigma * m.sigma;
        Ok(x.mapv(|v| -(v - m.alpha * mu) / var))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rhs_examples() {
        let vp = NoiseSchedule::vp();
        let x = array![[0.3, -1.2], [2.0, 0.5]];
        let stationary = flow_rhs(&vp, &x, 0.4, &x.mapv(|v| -v)).unwrap();
        assert!(stationary.iter().all(|v| v.abs() < 1e-14));
        let contraction = flow_rhs(&vp, &x, 0.4, &Array2::zeros((2, 2))).unwrap();
        let beta = vp.beta(0.4).unwrap();
        for (r, v) in contraction.iter().zip(x.iter()) {
            assert!((r + 0.5 * beta * v).abs() < 1e-14);
        }
        let ve = NoiseSchedule::ve();
        let t = 0.6;
        let sig = ve.marginal_params(t).unwrap().sigma;
        let score = x.mapv(|v| -v / (sig * sig));
        let rhs = flow_rhs(&ve, &x, t, &score).unwrap();
        // d(sigma^2)/dt = 2 sigma^2 ln(sigma_max / sigma_min)
        let dvar = 2.0 * sig * sig * (ve.sigma_max / ve.sigma_min).ln();
        for (r, v) in rhs.iter().zip(x.iter()) {
            assert!((r - 0.5 * dvar * v / (sig * sig)).abs() < 1e-10 * r.abs().max(1.0));
        }
    }

    #[test]
    fn exponential_decay_accuracy() {
        let cfg = SolverConfig { rtol: 1e-8, atol: 1e-10, ..SolverConfig::default() };
        let y0 = array![[1.0, -2.0]];
        let run = integrate(|y, _| Ok(y.mapv(|v| -3.0 * v)), &y0, 0.0, 2.0, &cfg).unwrap();
        for (a, b) in run.state.iter().zip(y0.iter()) {
            assert!((a - b * (-6.0f64).exp()).abs() < 1e-8);
        }
        let back = integrate(|y, _| Ok(y.mapv(|v| -3.0 * v)), &run.state, 2.0, 0.0, &cfg).unwrap();
        for (a, b) in back.state.iter().zip(y0.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        // Order check: y' = t^4 has no error at fifth order.
        let poly = integrate(|y, t| Ok(y.mapv(|_| t.powi(4))), &array![[0.0]], 0.0, 1.0, &cfg).unwrap();
        assert!((poly.state[[0, 0]] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn empty_interval_is_noop() {
        let vp = NoiseSchedule::vp();
        let cfg = SolverConfig { t_rec: 1e-3 + 1e-9, t_end: 1e-3, ..SolverConfig::default() };
        let x0 = array![[0.5], [-1.0], [2.0]];
        let noise = array![[0.1], [0.2], [-0.3]];
        let rec = reconstruct_with(&x0, &noise, &vp, &cfg, gaussian_score(&vp, 0.0, 1.0)).unwrap();
        let d = (&rec.x_hat - &rec.xt).mapv(|v| v * v).sum().sqrt();
        assert!(d < cfg.atol * 10.0);
    }

    #[test]
    fn failures_report_time() {
        let cfg = SolverConfig { max_steps: 3, rtol: 1e-12, atol: 1e-12, ..SolverConfig::default() };
        let e = integrate(|y, _| Ok(y.mapv(|v| -50.0 * v)), &array![[1.0]], 1.0, 0.0, &cfg).unwrap_err();
        assert!(matches!(e, Error::Solver { .. }), "{e}");
        let e = integrate(|y, t| if t < 0.5 { Ok(y.mapv(|_| f64::NAN)) } else { Ok(y.clone()) }, &array![[1.0]], 1.0, 0.0, &SolverConfig::default())
            .unwrap_err();
        match e {
            Error::Solver { t, .. } => assert!(t <= 0.6),
            other => panic!("{other}"),
        }
        let bad = SolverConfig { t_end: 0.6, ..SolverConfig::default() };
        assert!(bad.validate(&NoiseSchedule::vp()).is_err());
        assert!(SolverConfig::default().validate(&NoiseSchedule::vp()).is_ok());
    }

    #[test]
    fn gaussian_transport_map() {
        // The flow of an exact Gaussian score is affine:
        // x_hat - mu = s (x_t - alpha mu) / sqrt(alpha^2 s^2 + sigma^2) at t_end.
        let vp = NoiseSchedule::vp();
        let (mu, s) = (1.5, 0.4);
        let cfg = SolverConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = Array2::from_shape_fn((64, 1), |_| mu + s * rng.sample::<f64, _>(StandardNormal));
        let noise = draw_noise(&mut rng, (64, 1));
        let rec = reconstruct_with(&x0, &noise, &vp, &cfg, gaussian_score(&vp, mu, s)).unwrap();
        let m1 = vp.marginal_params(cfg.t_rec).unwrap();
        let m0 = vp.marginal_params(cfg.t_end).unwrap();
        let sd1 = (m1.alpha.powi(2) * s * s + m1.sigma.powi(2)).sqrt();
        let sd0 = (m0.alpha.powi(2) * s * s + m0.sigma.powi(2)).sqrt();
        for (xh, xt) in rec.x_hat.iter().zip(rec.xt.iter()) {
            let expect = m0.alpha * mu + sd0 * (xt - m1.alpha * mu) / sd1;
            assert!((xh - expect).abs() < 1e-4, "{xh} vs {expect}");
        }
    }

    #[test]
    fn deterministic_and_tolerance_monotone() {
        let vp = NoiseSchedule::vp();
        let x0 = Array2::from_shape_fn((20, 1), |(i, _)| 1.0 + 0.01 * i as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = draw_noise(&mut rng, (20, 1));
        let loose = SolverConfig::default();
        let a = reconstruct_with(&x0, &noise, &vp, &loose, gaussian_score(&vp, 1.0, 0.1)).unwrap();
        let b = reconstruct_with(&x0, &noise, &vp, &loose, gaussian_score(&vp, 1.0, 0.1)).unwrap();
        assert_eq!(a.x_hat, b.x_hat);
        let tight = SolverConfig { rtol: 1e-6, atol: 1e-6, ..loose };
        let c = reconstruct_with(&x0, &noise, &vp, &tight, gaussian_score(&vp, 1.0, 0.1)).unwrap();
        for (p, q) in a.x_hat.iter().zip(c.x_hat.iter()) {
            assert!((p - q).abs() < loose.atol + loose.rtol * q.abs());
        }
    }
}
