//! Experiment configuration: TOML sections mirroring the library modules,
//! unknown keys rejected, dotted `key=value` overrides applied before parsing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::objectives::LossConfig;
use crate::scorenet::ScoreNetConfig;
use crate::sde::NoiseSchedule;
use crate::solver::SolverConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training series. Its labels, if any, are ignored.
    pub train: Option<PathBuf>,
    /// Test series, optionally with a `.labels` sidecar.
    pub test: Option<PathBuf>,
    /// CSV files start with a row of channel names.
    pub header: bool,
    /// Z-score every channel with training statistics.
    pub normalize: bool,
    /// Generated in memory when no paths are given. The clean prefix is the
    /// training split and the rest the test split.
    pub synthetic: Option<SyntheticSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { train: None, test: None, header: false, normalize: true, synthetic: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub n: usize,
    /// `None` means non-overlapping windows.
    pub train_stride: Option<usize>,
    pub eval_stride: Option<usize>,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig { n: 100, train_stride: None, eval_stride: None }
    }
}

impl WindowConfig {
    pub fn train_stride(&self) -> usize {
        self.train_stride.unwrap_or(self.n)
    }

    pub fn eval_stride(&self) -> usize {
        self.eval_stride.unwrap_or(self.n)
    }
}

/// Network shape; window length and channel count come from the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub ff_mult: usize,
    pub scale_by_sigma: bool,
    pub embed_kernel: usize,
    pub time_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = ScoreNetConfig::default();
        ModelConfig {
            layers: d.layers,
            d_model: d.d_model,
            n_heads: d.n_heads,
            dropout: d.dropout,
            ff_mult: d.ff_mult,
            scale_by_sigma: d.scale_by_sigma,
            embed_kernel: d.embed_kernel,
            time_scale: d.time_scale,
        }
    }
}

impl ModelConfig {
    pub fn network(&self, window: usize, d_in: usize, init_seed: u64) -> ScoreNetConfig {
        ScoreNetConfig {
            layers: self.layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            window,
            d_in,
            dropout: self.dropout,
            ff_mult: self.ff_mult,
            scale_by_sigma: self.scale_by_sigma,
            embed_kernel: self.embed_kernel,
            time_scale: self.time_scale,
            init_seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    /// Learning-rate multiplier applied after every epoch.
    pub lr_decay: f64,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: None, lr_decay: 0.25, batch_size: 256 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epochs without improvement of the mean training loss before stopping.
    pub patience: usize,
    /// Use only this leading fraction of the training windows.
    pub fraction: f64,
    pub seed: u64,
    /// Hard cap on optimizer steps, mainly for smoke runs.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 10, patience: 3, fraction: 1.0, seed: 0, max_steps: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioSource {
    GapStatistic,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorePool {
    TrainTest,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ratio_source: RatioSource,
    /// Percentage used when `ratio_source = "fixed"` and as the fallback when
    /// the gap statistic has no usable split.
    pub ratio: f64,
    pub pool: ScorePool,
    /// Largest VUS buffer; `None` sweeps up to the median episode length.
    pub vus_max_buffer: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { ratio_source: RatioSource::GapStatistic, ratio: 1.0, pool: ScorePool::TrainTest, vus_max_buffer: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Score the unperturbed input and reconstruct with one denoising step at
    /// `solver.t_end` instead of integrating from `solver.t_rec`.
    pub raw_model: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunsConfig {
    /// Independent runs with seeds `train.seed, train.seed + 1, ...`.
    pub n_seeds: usize,
}

impl Default for RunsConfig {
    fn default() -> Self {
        RunsConfig { n_seeds: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub window: WindowConfig,
    pub scorenet: ModelConfig,
    pub sde: NoiseSchedule,
    pub solver: SolverConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
    pub runs: RunsConfig,
}

fn parse_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Applies `a.b.c=value` to a TOML table, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key '{key}'")));
    }
    let (last, path) = parts.split_last().expect("non-empty key");
    let mut cur = table;
    for p in path {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': '{p}' is not a section")))?;
    }
    cur.insert(last.to_string(), parse_value(value));
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML text plus overrides. Relative data paths are resolved
    /// against `base`.
    pub fn from_toml(text: &str, overrides: &[String], base: Option<&Path>) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(one_line(&e.to_string())))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: ExperimentConfig = table.try_into().map_err(|e| Error::Config(one_line(&e.to_string())))?;
        if let Some(base) = base {
            for p in [&mut cfg.data.train, &mut cfg.data.test].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or the defaults when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let base = p.parent().filter(|b| !b.as_os_str().is_empty());
                Self::from_toml(&text, overrides, base)
            }
            None => Self::from_toml("", overrides, None),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.window.n < 2 {
            return cfg_err("window.n must be >= 2".into());
        }
        for s in [self.window.train_stride(), self.window.eval_stride()] {
            if s == 0 || s > self.window.n {
                return cfg_err(format!("window strides must be in [1, {}]", self.window.n));
            }
        }
        self.scorenet.network(self.window.n, 1, 0).validate()?;
        self.sde.validate()?;
        self.solver.validate(&self.sde)?;
        self.loss.validate()?;
        let o = &self.optim;
        if !(o.lr > 0.0) || !(o.lr_decay > 0.0 && o.lr_decay <= 1.0) || o.batch_size == 0 {
            return cfg_err("optim needs lr > 0, lr_decay in (0, 1], batch_size >= 1".into());
        }
        if !(o.beta1 >= 0.0 && o.beta1 < 1.0) || !(o.beta2 >= 0.0 && o.beta2 < 1.0) || !(o.eps > 0.0) {
            return cfg_err("optim betas must be in [0, 1) and eps > 0".into());
        }
        if !(self.train.fraction > 0.0 && self.train.fraction <= 1.0) {
            return cfg_err("train.fraction must be in (0, 1]".into());
        }
        if self.train.epochs == 0 {
            return cfg_err("train.epochs must be >= 1".into());
        }
        if !(self.eval.ratio > 0.0 && self.eval.ratio < 100.0) {
            return cfg_err("eval.ratio must be in (0, 100)".into());
        }
        if self.runs.n_seeds == 0 {
            return cfg_err("runs.n_seeds must be >= 1".into());
        }
        if self.data.synthetic.is_none() && (self.data.train.is_none() || self.data.test.is_none()) {
            return cfg_err("set data.train and data.test, or data.synthetic".into());
        }
        Ok(())
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = "[data.synthetic]\nlength = 500\nclean_prefix = 200\n";

    #[test]
    fn defaults_follow_reference_setup() {
        let c = ExperimentConfig::from_toml(MIN, &[], None).unwrap();
        assert_eq!(c.window.n, 100);
        assert_eq!((c.scorenet.layers, c.scorenet.d_model, c.scorenet.n_heads), (3, 512, 8));
        assert_eq!((c.sde.beta_min, c.sde.beta_max), (0.1, 20.0));
        assert_eq!((c.optim.lr, c.optim.batch_size, c.optim.lr_decay), (1e-4, 256, 0.25));
        assert_eq!(c.loss.lambda_gamma, 3.0);
        assert_eq!(c.solver, SolverConfig::default());
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let sets = vec![
            "window.n=50".to_string(),
            "scorenet.d_model = 64".into(),
            "loss.enable.gamma=false".into(),
            "sde.kind=ve".into(),
            "eval.ratio_source=fixed".into(),
        ];
        let c = ExperimentConfig::from_toml(MIN, &sets, None).unwrap();
        assert_eq!(c.window.n, 50);
        assert_eq!(c.scorenet.d_model, 64);
        assert!(!c.loss.enable.gamma);
        assert_eq!(c.sde.kind, crate::sde::SdeKind::Ve);
        assert_eq!(c.eval.ratio_source, RatioSource::Fixed);

        for bad in ["window.m=3", "nosuch.key=1", "window=3", "optim.lr=-1"] {
            let e = ExperimentConfig::from_toml(MIN, &[bad.to_string()], None).unwrap_err();
            assert!(matches!(e, Error::Config(_)), "{bad}: {e}");
        }
        assert!(ExperimentConfig::from_toml("[window]\nn = 10\nbogus = 1\n", &[], None).is_err());
        assert!(ExperimentConfig::from_toml("", &[], None).is_err());
    }

    #[test]
    fn round_trip_and_relative_paths() {
        let c = ExperimentConfig::from_toml(MIN, &[], None).unwrap();
        let again = ExperimentConfig::from_toml(&c.to_toml(), &[], None).unwrap();
        assert_eq!(c, again);
        let p = ExperimentConfig::from_toml("[data]\ntrain = \"a.csv\"\ntest = \"/abs/b.csv\"\n", &[], Some(Path::new("/cfg"))).unwrap();
        assert_eq!(p.data.train.unwrap(), PathBuf::from("/cfg/a.csv"));
        assert_eq!(p.data.test.unwrap(), PathBuf::from("/abs/b.csv"));
    }
}
