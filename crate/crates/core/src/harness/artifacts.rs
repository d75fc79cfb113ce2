use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::data::NormalizationStats;
use crate::error::{Error, Result};
use crate::objectives::Phase;
use crate::scorenet::ScoreNetConfig;

pub const MANIFEST: &str = "manifest.json";
pub const BEST_CHECKPOINT: &str = "model_best.bin";
pub const LAST_CHECKPOINT: &str = "model_last.bin";
pub const LOSS_LOG: &str = "loss_log.jsonl";

/// One line of the loss log, averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub phase: Phase,
    pub dsm: f64,
    pub rec: f64,
    pub vm: f64,
    pub gamma: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub mean_total: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    EarlyStopped,
    StepLimit,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub package_version: String,
    pub os: String,
    pub arch: String,
    pub threads: usize,
}

impl Environment {
    pub fn current() -> Self {
        Environment {
            package_version: env!("CARGO_PKG_VERSION").to_string(),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            threads: rayon::current_num_threads(),
        }
    }
}

/// Everything needed to rebuild and re-evaluate a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub status: RunStatus,
    pub config: ExperimentConfig,
    pub network: ScoreNetConfig,
    pub normalization: NormalizationStats,
    pub center: Vec<Vec<f64>>,
    pub param_shapes: Vec<(String, [usize; 2])>,
    pub n_train_windows: usize,
    pub steps: usize,
    pub best_epoch: Option<usize>,
    pub best_loss: Option<f64>,
    pub epochs: Vec<EpochSummary>,
    pub environment: Environment,
}

impl RunManifest {
    pub const FORMAT_VERSION: u32 = 1;

    pub fn center_matrix(&self) -> Result<Array2<f64>> {
        let rows = self.center.len();
        let cols = self.center.first().map_or(0, Vec::len);
        let flat: Vec<f64> = self.center.iter().flatten().copied().collect();
        Array2::from_shape_vec((rows, cols), flat).map_err(|e| Error::Checkpoint(format!("center: {e}")))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: RunManifest = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if m.format_version != Self::FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported manifest version {}", m.format_version)));
        }
        Ok(m)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(MANIFEST), serde_json::to_string_pretty(self).expect("manifest serializes").as_bytes())
    }
}

/// Writes through a temporary file so readers never see partial contents.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) struct LossLog {
    file: fs::File,
    path: std::path::PathBuf,
}

impl LossLog {
    pub fn create(dir: &Path) -> Result<Self> {
        let path = dir.join(LOSS_LOG);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(LossLog { file, path })
    }

    pub fn push(&mut self, rec: &LossRecord) -> Result<()> {
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_loss_log(dir: &Path) -> Result<Vec<LossRecord>> {
    let path = dir.join(LOSS_LOG);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse { path: path.clone(), row: i, msg: e.to_string() })
        })
        .collect()
}
