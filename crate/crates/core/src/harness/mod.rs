//! Training and evaluation orchestration with on-disk run artifacts.

mod artifacts;
mod config;
mod evaluate;
mod train;

pub use artifacts::{read_loss_log, Environment, EpochSummary, LossRecord, RunManifest, RunStatus, BEST_CHECKPOINT, LAST_CHECKPOINT, LOSS_LOG, MANIFEST};
pub use config::{
    apply_override, AblationConfig, DataConfig, EvalConfig, ExperimentConfig, ModelConfig, OptimConfig, RatioSource,
    RunsConfig, ScorePool, TrainConfig, WindowConfig,
};
pub use evaluate::{detect_scores, evaluate, load_model, score_series, DetectionSummary, EvaluationOutcome, SCORES_TEST, SCORES_TRAIN, DETECTION, REPORT_JSON, REPORT_TXT};
pub use train::{train, TrainOutcome};

use ndarray::Array2;

use crate::data::{self, LabeledSeries, NormalizationStats, SeriesFormat};
use crate::error::{Error, Result};

/// Train and test splits, before normalization.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: LabeledSeries,
    pub test: LabeledSeries,
}

/// Loads the configured splits or generates the synthetic series.
pub fn load_splits(cfg: &DataConfig) -> Result<Splits> {
    if let (Some(tr), Some(te)) = (&cfg.train, &cfg.test) {
        let train = data::load_series(tr, SeriesFormat::from_path(tr, cfg.header)?)?;
        let test = data::load_series(te, SeriesFormat::from_path(te, cfg.header)?)?;
        if train.channels() != test.channels() {
            return Err(Error::Shape(format!(
                "train has {} channels, test has {}",
                train.channels(),
                test.channels()
            )));
        }
        return Ok(Splits { train, test });
    }
    let spec = cfg
        .synthetic
        .as_ref()
        .ok_or_else(|| Error::Config("no data source configured".into()))?;
    synthetic_splits(spec)
}

/// Clean prefix as training split, remainder as test split.
pub fn synthetic_splits(spec: &data::SyntheticSpec) -> Result<Splits> {
    if spec.clean_prefix == 0 || spec.clean_prefix >= spec.length {
        return Err(Error::Config("data.synthetic.clean_prefix must be in (0, length)".into()));
    }
    let full = data::generate_synthetic(spec)?;
    Ok(Splits {
        train: full.slice(0, spec.clean_prefix)?,
        test: full.slice(spec.clean_prefix, spec.length)?,
    })
}

pub(crate) fn fit_stats(cfg: &DataConfig, train: &LabeledSeries) -> NormalizationStats {
    if cfg.normalize {
        NormalizationStats::fit(train)
    } else {
        NormalizationStats::identity(train.channels())
    }
}

pub(crate) fn window_matrices(series: &LabeledSeries, n: usize, stride: usize) -> Result<(Vec<Array2<f64>>, Vec<usize>)> {
    let ws = data::window(series, n, stride)?;
    Ok(ws.into_iter().map(|w| (w.x0, w.start_index)).unzip())
}
