use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::artifacts::{write_atomic, RunManifest, BEST_CHECKPOINT};
use super::config::{ExperimentConfig, RatioSource, ScorePool};
use super::{load_splits, window_matrices};
use crate::data::{gap_statistic_ratio, normalize, LabeledSeries};
use crate::error::{Error, Result};
use crate::metrics::{EvaluationReport, VusBuffer};
use crate::objectives::{contextual_gain, vm_loss, Center};
use crate::scorenet::ScoreNet;
use crate::scoring::{stitch, threshold_by_ratio, window_anomaly_score, AnomalyScoreSeries, DetectionResult};
use crate::solver::{draw_noise, reconstruct, SolverConfig};

pub const SCORES_TEST: &str = "scores_test.csv";
pub const SCORES_TRAIN: &str = "scores_train.csv";
pub const DETECTION: &str = "detection.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";

const TRAIN_STREAM: u64 = 0x7472;
const TEST_STREAM: u64 = 0x7465;
const DETECT_STREAM: u64 = 0x6465;

/// Rebuilds the network from a run directory.
pub fn load_model(run: &Path) -> Result<(ScoreNet, Center, RunManifest)> {
    let manifest = RunManifest::read(run)?;
    let mut model = ScoreNet::new(manifest.network.clone(), manifest.config.sde)?;
    let path = run.join(BEST_CHECKPOINT);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    model.store_mut().load_bytes(&bytes)?;
    let c = manifest.center_matrix()?;
    if c.dim() != (manifest.network.window, manifest.network.d_in) {
        return Err(Error::Checkpoint(format!("center shape {:?} does not match the network", c.dim())));
    }
    Ok((model, Center { c }, manifest))
}

fn window_score(
    model: &ScoreNet,
    center: &Center,
    x0: &Array2<f64>,
    solver: &SolverConfig,
    raw: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<crate::scoring::ScoreParts>> {
    let (x_hat, out) = if raw {
        let t = solver.t_end;
        let out = model.forward(x0, t)?;
        let m = model.schedule().marginal_params(t)?;
        let x_hat = (x0 + &(&out.score * (m.sigma * m.sigma))) / m.alpha;
        (x_hat, out)
    } else {
        let noise = draw_noise(rng, x0.dim());
        let (rec, out) = reconstruct(x0, model, solver, &noise)?;
        (rec.x_hat, out)
    };
    let rec_err = (&x_hat - x0).mapv(|v| v * v).sum_axis(Axis(1)).to_vec();
    let gamma = contextual_gain(&out.chars)?;
    let (center_dist, _) = vm_loss(&out.score, center)?;
    window_anomaly_score(&gamma, &rec_err, &center_dist)
}

/// Scores every point of a normalized series. Window `i` draws its noise
/// from stream `i` of a generator seeded with `seed`, so the result does not
/// depend on scheduling.
pub fn score_series(
    model: &ScoreNet,
    center: &Center,
    series: &LabeledSeries,
    stride: usize,
    solver: &SolverConfig,
    raw_model: bool,
    seed: u64,
) -> Result<AnomalyScoreSeries> {
    let n = model.config().window;
    let (windows, starts) = window_matrices(series, n, stride)?;
    let per: Vec<Result<Vec<crate::scoring::ScoreParts>>> = windows
        .par_iter()
        .enumerate()
        .map(|(i, x0)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            window_score(model, center, x0, solver, raw_model, &mut rng)
        })
        .collect();
    let per = per.into_iter().collect::<Result<Vec<_>>>()?;
    stitch(&per, &starts, series.len())
}

/// Scores an unlabeled raw series with a trained run: channel check,
/// training normalization, then [`score_series`] on its own noise stream.
pub fn detect_scores(
    model: &ScoreNet,
    center: &Center,
    manifest: &RunManifest,
    cfg: &ExperimentConfig,
    raw: &LabeledSeries,
) -> Result<AnomalyScoreSeries> {
    if raw.channels() != manifest.network.d_in {
        return Err(Error::Shape(format!(
            "model expects {} channels, input has {}",
            manifest.network.d_in,
            raw.channels()
        )));
    }
    let series = normalize(raw, &manifest.normalization)?;
    score_series(
        model,
        center,
        &series,
        cfg.window.eval_stride(),
        &cfg.solver,
        cfg.ablation.raw_model,
        manifest.config.train.seed ^ DETECT_STREAM,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub threshold: f64,
    pub anomaly_ratio: f64,
    pub ratio_source: RatioSource,
    pub n_flagged: usize,
}

pub struct EvaluationOutcome {
    pub report: EvaluationReport,
    pub detection: DetectionResult,
    pub ratio_source: RatioSource,
    pub train_scores: AnomalyScoreSeries,
    pub test_scores: AnomalyScoreSeries,
    pub labels: Vec<u8>,
}

fn check_compatible(cfg: &ExperimentConfig, m: &RunManifest, channels: usize) -> Result<()> {
    let want = cfg.scorenet.network(cfg.window.n, channels, m.network.init_seed);
    let have = &m.network;
    let mismatch = want.layers != have.layers
        || want.d_model != have.d_model
        || want.n_heads != have.n_heads
        || want.window != have.window
        || want.d_in != have.d_in
        || want.ff_mult != have.ff_mult
        || want.scale_by_sigma != have.scale_by_sigma;
    if mismatch {
        return Err(Error::Checkpoint(format!(
            "config describes a {}x{} network with {} layers, d_model {}; checkpoint has {}x{}, {} layers, d_model {}",
            want.window, want.d_in, want.layers, want.d_model, have.window, have.d_in, have.layers, have.d_model
        )));
    }
    if cfg.sde != m.config.sde {
        return Err(Error::Checkpoint("sde settings differ from the checkpoint".into()));
    }
    Ok(())
}

/// Scores both splits with the trained model, selects the anomaly ratio,
/// thresholds the test scores and computes all metrics. Writes the report,
/// detections and score CSVs to `out`.
pub fn evaluate(cfg: &ExperimentConfig, run: &Path, out: &Path) -> Result<EvaluationOutcome> {
    cfg.validate()?;
    let (model, center, manifest) = load_model(run)?;
    let splits = load_splits(&cfg.data)?;
    check_compatible(cfg, &manifest, splits.train.channels())?;
    let labels = splits
        .test
        .labels
        .clone()
        .ok_or_else(|| Error::InvalidInput("test split has no labels; use detect for unlabeled data".into()))?;
    let train = normalize(&splits.train, &manifest.normalization)?;
    let test = normalize(&splits.test, &manifest.normalization)?;

    let seed = manifest.config.train.seed;
    let stride = cfg.window.eval_stride();
    let raw = cfg.ablation.raw_model;
    let train_scores = score_series(&model, &center, &train, stride, &cfg.solver, raw, seed ^ TRAIN_STREAM)?;
    let test_scores = score_series(&model, &center, &test, stride, &cfg.solver, raw, seed ^ TEST_STREAM)?;

    let (ratio, source) = match cfg.eval.ratio_source {
        RatioSource::Fixed => (cfg.eval.ratio, RatioSource::Fixed),
        RatioSource::GapStatistic => match gap_statistic_ratio(&train_scores.scores) {
            Ok(r) if r > 0.0 && r < 100.0 => (r, RatioSource::GapStatistic),
            Ok(r) => {
                log::warn!("gap statistic ratio {r} unusable; falling back to eval.ratio");
                (cfg.eval.ratio, RatioSource::Fixed)
            }
            Err(e) => {
                log::warn!("gap statistic unavailable ({e}); falling back to eval.ratio");
                (cfg.eval.ratio, RatioSource::Fixed)
            }
        },
    };
    let pool: Vec<f64> = match cfg.eval.pool {
        ScorePool::TrainTest => train_scores.scores.iter().chain(&test_scores.scores).copied().collect(),
        ScorePool::Test => test_scores.scores.clone(),
    };
    let detection = threshold_by_ratio(&test_scores.scores, &pool, ratio)?;
    let report = EvaluationReport::compute(
        &labels,
        &test_scores.scores,
        &detection.predictions,
        VusBuffer::Sweep { max: cfg.eval.vus_max_buffer },
    )?;

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    test_scores.write_csv(&out.join(SCORES_TEST), Some(&detection.predictions))?;
    train_scores.write_csv(&out.join(SCORES_TRAIN), None)?;
    let summary = DetectionSummary {
        threshold: detection.threshold,
        anomaly_ratio: detection.anomaly_ratio,
        ratio_source: source,
        n_flagged: detection.n_flagged(),
    };
    write_atomic(&out.join(DETECTION), serde_json::to_string_pretty(&summary).expect("serializes").as_bytes())?;
    write_atomic(&out.join(REPORT_JSON), serde_json::to_string_pretty(&report).expect("serializes").as_bytes())?;
    write_atomic(&out.join(REPORT_TXT), report.to_table(&dataset_name(cfg)).as_bytes())?;
    Ok(EvaluationOutcome { report, detection, ratio_source: source, train_scores, test_scores, labels })
}

pub(crate) fn dataset_name(cfg: &ExperimentConfig) -> String {
    cfg.data
        .test
        .as_ref()
        .and_then(|p| p.file_stem())
        .map_or_else(|| "synthetic".to_string(), |s| s.to_string_lossy().into_owned())
}
