//! Forward perturbation processes (VP, sub-VP, VE) and their Gaussian
//! transition kernels.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Time horizon of every schedule.
pub const T_MAX: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SdeKind {
    Vp,
    SubVp,
    Ve,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSchedule {
    pub kind: SdeKind,
    pub beta_min: f64,
    pub beta_max: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub t_eps: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            kind: SdeKind::Vp,
            beta_min: 0.1,
            beta_max: 20.0,
            sigma_min: 0.01,
            sigma_max: 50.0,
            t_eps: 1e-5,
        }
    }
}

/// Mean coefficient and standard deviation of `x(t) | x(0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalParams {
    pub alpha: f64,
    pub sigma: f64,
}

/// A window perturbed to time `t`: `xt = alpha * x0 + sigma * noise`.
#[derive(Debug, Clone)]
pub struct PerturbedBatch {
    pub x0: Array2<f64>,
    pub t: f64,
    pub noise: Array2<f64>,
    pub xt: Array2<f64>,
    pub marginal: MarginalParams,
}

impl NoiseSchedule {
    pub fn vp() -> Self {
        Self::default()
    }

    pub fn sub_vp() -> Self {
        NoiseSchedule {
            kind: SdeKind::SubVp,
            ..Self::default()
        }
    }

    pub fn ve() -> Self {
        NoiseSchedule {
            kind: SdeKind::Ve,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_eps > 0.0 && self.t_eps < T_MAX) {
            return Err(Error::Config(format!("sde.t_eps must lie in (0, 1), got {}", self.t_eps)));
        }
        match self.kind {
            SdeKind::Vp | SdeKind::SubVp => {
                if !(self.beta_min >= 0.0 && self.beta_min < self.beta_max) {
                    return Err(Error::Config(format!(
                        "sde requires 0 <= beta_min < beta_max, got {} / {}",
                        self.beta_min, self.beta_max
                    )));
                }
            }
            SdeKind::Ve => {
                if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
                    return Err(Error::Config(format!(
                        "sde requires 0 < sigma_min < sigma_max, got {} / {}",
                        self.sigma_min, self.sigma_max
                    )));
                }
            }
        }
        Ok(())
    }

    fn check_t(&self, t: f64, allow_zero: bool) -> Result<()> {
        let ok = if allow_zero { (0.0..=T_MAX).contains(&t) } else { t > 0.0 && t <= T_MAX };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("time {t} outside the schedule range")))
        }
    }

    /// Linear noise rate `beta(t)`.
    pub fn beta(&self, t: f64) -> Result<f64> {
        if self.kind == SdeKind::Ve {
            return Err(Error::InvalidInput("beta(t) is undefined for a VE schedule".into()));
        }
        self.check_t(t, true)?;
        Ok(self.beta_min + t * (self.beta_max - self.beta_min) / T_MAX)
    }

    /// `B(t) = integral of beta over [0, t]`.
    pub fn integrated_beta(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * t * t * (self.beta_max - self.beta_min) / T_MAX
    }

    /// VE noise scale `sigma_min * (sigma_max / sigma_min)^t`.
    pub fn ve_sigma(&self, t: f64) -> f64 {
        self.sigma_min * (self.sigma_max / self.sigma_min).powf(t)
    }

    pub fn marginal_params(&self, t: f64) -> Result<MarginalParams> {
        self.check_t(t, false)?;
        Ok(match self.kind {
            SdeKind::Vp => {
                let b = self.integrated_beta(t);
                let alpha = (-0.5 * b).exp();
                // 1 - alpha^2 = -expm1(-B), exact near t = 0
                MarginalParams { alpha, sigma: (-(-b).exp_m1()).sqrt() }
            }
            SdeKind::SubVp => {
                let b = self.integrated_beta(t);
                MarginalParams { alpha: (-0.5 * b).exp(), sigma: -(-b).exp_m1() }
            }
            SdeKind::Ve => MarginalParams { alpha: 1.0, sigma: self.ve_sigma(t) },
        })
    }

    pub fn perturb(&self, x0: &Array2<f64>, t: f64, noise: &Array2<f64>) -> Result<PerturbedBatch> {
        if x0.dim() != noise.dim() {
            return Err(Error::Shape(format!(
                "noise shape {:?} differs from input shape {:?}",
                noise.dim(),
                x0.dim()
            )));
        }
        let marginal = self.marginal_params(t)?;
        let xt = x0 * marginal.alpha + noise * marginal.sigma;
        Ok(PerturbedBatch {
            x0: x0.clone(),
            t,
            noise: noise.clone(),
            xt,
            marginal,
        })
    }

    /// Scalar `a(t)` such that the drift is `f(x, t) = a(t) * x`.
    pub fn drift_coef(&self, t: f64) -> Result<f64> {
        match self.kind {
            SdeKind::Vp | SdeKind::SubVp => Ok(-0.5 * self.beta(t)?),
            SdeKind::Ve => {
                self.check_t(t, true)?;
                Ok(0.0)
            }
        }
    }

    /// Squared diffusion coefficient `g(t)^2`.
    pub fn diffusion_sq(&self, t: f64) -> Result<f64> {
        match self.kind {
            SdeKind::Vp => self.beta(t),
            SdeKind::SubVp => {
                let b = self.integrated_beta(t);
                Ok(self.beta(t)? * -(-2.0 * b).exp_m1())
            }
            SdeKind::Ve => {
                self.check_t(t, true)?;
                let s = self.ve_sigma(t);
                Ok(2.0 * s * s * (self.sigma_max / self.sigma_min).ln())
            }
        }
    }

    /// Drift `f(x, t)` and diffusion `g(t)` of the forward SDE.
    pub fn drift_diffusion(&self, x: &Array2<f64>, t: f64) -> Result<(Array2<f64>, f64)> {
        let a = self.drift_coef(t)?;
        let g2 = self.diffusion_sq(t)?;
        Ok((x * a, g2.sqrt()))
    }

    /// Uniform draw on `(t_eps, T]`.
    pub fn sample_time<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        // random::<f64>() is in [0, 1); flip to (0, 1]
        let u = 1.0 - rng.random::<f64>();
        self.t_eps + u * (T_MAX - self.t_eps)
    }
}
