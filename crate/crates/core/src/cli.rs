//! Command-line front end. Every verb maps failures to an exit code and a
//! single `error:` line on stderr.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{self, write_series, LabeledSeries, SeriesFormat};
use crate::error::{Error, ErrorClass, Result};
use crate::harness::{
    detect_scores, evaluate, load_model, load_splits, train, DetectionSummary, ExperimentConfig, DETECTION,
    REPORT_JSON, REPORT_TXT, SCORES_TEST,
};
use crate::metrics::{episodes, EvaluationReport};
use crate::plot::TracePlot;
use crate::scoring::threshold_by_ratio;

#[derive(Debug, Parser)]
#[command(name = "u2ad", version, about = "Score-based time-series anomaly detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set window.n=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output (or run) directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Seed for generation (`data.synthetic.seed`) or training (`train.seed`).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic train/test pair with labels.
    Generate(Common),
    /// Train a model into the output directory.
    Train(Common),
    /// Score a series with a trained model, ignoring any labels.
    Detect {
        #[command(flatten)]
        common: Common,
        /// Series to score (CSV or f32bin).
        #[arg(long)]
        input: PathBuf,
    },
    /// Score the test split of a trained run and compute all metrics.
    Evaluate(Common),
    /// Render score plots and the metrics table of an evaluated run.
    Report(Common),
}

/// Parses `argv` and runs the verb. Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let class = match e.class() {
                ErrorClass::Config => "config",
                ErrorClass::Data => "data",
                ErrorClass::Runtime => "runtime",
            };
            let msg: String = e.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
            eprintln!("error: class={class} code={} msg={msg}", e.exit_code());
            e.exit_code()
        }
    }
}

fn load_config(c: &Common, seed_key: &str) -> Result<ExperimentConfig> {
    let mut sets = c.overrides.clone();
    if let Some(s) = c.seed {
        sets.push(format!("{seed_key}={s}"));
    }
    ExperimentConfig::load(c.config.as_deref(), &sets)
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate(c) => generate(&c),
        Command::Train(c) => {
            let cfg = load_config(&c, "train.seed")?;
            for (seed, dir) in seed_dirs(&cfg, &c.out) {
                let mut cfg = cfg.clone();
                cfg.train.seed = seed;
                let outcome = train(&cfg, &dir)?;
                println!(
                    "trained {} steps ({:?}), best epoch {:?} -> {}",
                    outcome.manifest.steps,
                    outcome.manifest.status,
                    outcome.manifest.best_epoch,
                    dir.display()
                );
            }
            Ok(())
        }
        Command::Evaluate(c) => {
            let cfg = load_config(&c, "train.seed")?;
            let mut reports = Vec::new();
            for (_, dir) in seed_dirs(&cfg, &c.out) {
                let outcome = evaluate(&cfg, &dir, &dir)?;
                print!("{}", fs::read_to_string(dir.join(REPORT_TXT)).unwrap_or_default());
                reports.push(outcome.report);
            }
            if reports.len() > 1 {
                let summary = summarize(&reports);
                let path = c.out.join("summary.json");
                fs::write(&path, serde_json::to_string_pretty(&summary).expect("serializes")).map_err(|e| Error::io(&path, e))?;
                println!("mean ± std over {} seeds written to {}", reports.len(), path.display());
            }
            Ok(())
        }
        Command::Detect { common, input } => detect(&common, &input),
        Command::Report(c) => report(&c),
    }
}

/// `(seed, directory)` per configured run.
fn seed_dirs(cfg: &ExperimentConfig, out: &Path) -> Vec<(u64, PathBuf)> {
    let n = cfg.runs.n_seeds as u64;
    (0..n)
        .map(|k| {
            let seed = cfg.train.seed + k;
            let dir = if n == 1 { out.to_path_buf() } else { out.join(format!("seed_{seed}")) };
            (seed, dir)
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

fn summarize(reports: &[EvaluationReport]) -> std::collections::BTreeMap<String, MetricSummary> {
    let fields: [(&str, fn(&EvaluationReport) -> Option<f64>); 9] = [
        ("precision", |r| Some(r.precision)),
        ("recall", |r| Some(r.recall)),
        ("f1", |r| Some(r.f1)),
        ("add", |r| r.add),
        ("nrd", |r| r.nrd),
        ("auc_roc", |r| r.auc_roc),
        ("auc_pr", |r| r.auc_pr),
        ("vus_roc", |r| r.vus_roc),
        ("vus_pr", |r| r.vus_pr),
    ];
    fields
        .iter()
        .map(|(name, get)| {
            let v: Vec<f64> = reports.iter().filter_map(get).collect();
            let n = v.len();
            let mean = if n > 0 { v.iter().sum::<f64>() / n as f64 } else { f64::NAN };
            let std = if n > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
            (name.to_string(), MetricSummary { mean, std, n })
        })
        .collect()
}

fn generate(c: &Common) -> Result<()> {
    let cfg = load_config(c, "data.synthetic.seed")?;
    let spec = cfg
        .data
        .synthetic
        .clone()
        .ok_or_else(|| Error::Config("generate needs a [data.synthetic] section".into()))?;
    let (full, injected) = data::generate_synthetic_detailed(&spec)?;
    fs::create_dir_all(&c.out).map_err(|e| Error::io(&c.out, e))?;
    let fmt = SeriesFormat::Csv { header: cfg.data.header };
    if spec.clean_prefix > 0 && spec.clean_prefix < spec.length {
        write_series(&c.out.join("train.csv"), &full.slice(0, spec.clean_prefix)?, fmt)?;
        write_series(&c.out.join("test.csv"), &full.slice(spec.clean_prefix, spec.length)?, fmt)?;
    }
    write_series(&c.out.join("series.csv"), &full, fmt)?;
    let path = c.out.join("anomalies.json");
    fs::write(&path, serde_json::to_string_pretty(&injected).expect("serializes")).map_err(|e| Error::io(&path, e))?;
    println!("wrote {} points x {} channels ({} anomalies) to {}", full.len(), full.channels(), injected.len(), c.out.display());
    Ok(())
}

pub const DETECT_SCORES: &str = "detect_scores.csv";
pub const DETECT_THRESHOLD: &str = "detect_threshold.json";

fn detect(c: &Common, input: &Path) -> Result<()> {
    let cfg = load_config(c, "train.seed")?;
    let (model, center, manifest) = load_model(&c.out)?;
    let raw = data::load_series_unlabeled(input, SeriesFormat::from_path(input, cfg.data.header)?)?;
    let scores = detect_scores(&model, &center, &manifest, &cfg, &raw)?;
    // Reuse the evaluated threshold when the run has one.
    let saved = fs::read_to_string(c.out.join(DETECTION))
        .ok()
        .and_then(|t| serde_json::from_str::<DetectionSummary>(&t).ok());
    let (threshold, ratio) = match saved {
        Some(s) => (s.threshold, s.anomaly_ratio),
        None => {
            let d = threshold_by_ratio(&scores.scores, &scores.scores, cfg.eval.ratio)?;
            (d.threshold, d.anomaly_ratio)
        }
    };
    let predictions: Vec<u8> = scores.scores.iter().map(|&s| u8::from(s > threshold)).collect();
    scores.write_csv(&c.out.join(DETECT_SCORES), Some(&predictions))?;
    let n_flagged = predictions.iter().filter(|&&p| p == 1).count();
    let summary = serde_json::json!({ "threshold": threshold, "anomaly_ratio": ratio, "n_flagged": n_flagged, "input": input });
    let path = c.out.join(DETECT_THRESHOLD);
    fs::write(&path, serde_json::to_string_pretty(&summary).expect("serializes")).map_err(|e| Error::io(&path, e))?;
    println!("flagged {n_flagged} of {} points (threshold {threshold:.6})", scores.len());
    Ok(())
}

fn read_score_csv(path: &Path) -> Result<(Vec<f64>, Vec<u8>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let mut scores = Vec::new();
    let mut preds = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse { path: path.into(), row, msg: e.to_string() })?;
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Parse { path: path.into(), row, msg: format!("bad column {i}") })
        };
        scores.push(parse(1)?);
        preds.push(rec.get(5).and_then(|v| v.parse().ok()).unwrap_or(0));
    }
    Ok((scores, preds))
}

fn report(c: &Common) -> Result<()> {
    let run = &c.out;
    let (scores, _) = read_score_csv(&run.join(SCORES_TEST))?;
    let detection: DetectionSummary = {
        let p = run.join(DETECTION);
        let t = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&t).map_err(|e| Error::Parse { path: p, row: 0, msg: e.to_string() })?
    };
    let rep: EvaluationReport = {
        let p = run.join(REPORT_JSON);
        let t = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&t).map_err(|e| Error::Parse { path: p, row: 0, msg: e.to_string() })?
    };
    // The input panel needs the data; without a config only scores are drawn.
    let test: Option<LabeledSeries> = match &c.config {
        Some(_) => Some(load_splits(&load_config(c, "train.seed")?.data)?.test),
        None => None,
    };
    if let Some(t) = &test {
        if t.len() != scores.len() {
            return Err(Error::Shape(format!("test split has {} points, scores {}", t.len(), scores.len())));
        }
    }
    let eps = test.as_ref().and_then(|t| t.labels.as_deref()).map(episodes).unwrap_or_default();
    let plots = run.join("plots");
    fs::create_dir_all(&plots).map_err(|e| Error::io(&plots, e))?;
    let svg = TracePlot {
        title: "input and anomaly score",
        input: test.as_ref().map(|t| &t.values),
        scores: &scores,
        threshold: Some(detection.threshold),
        episodes: &eps,
    }
    .to_svg();
    let path = plots.join("scores.svg");
    fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
    // Per-episode close-ups, at most a dozen.
    for (k, e) in eps.iter().take(12).enumerate() {
        let pad = (e.end - e.start).max(50);
        let (a, b) = (e.start.saturating_sub(pad), (e.end + pad).min(scores.len()));
        let window = test.as_ref().map(|t| t.values.slice(ndarray::s![a..b, ..]).to_owned());
        let local = [crate::metrics::EventSpan { start: e.start - a, end: e.end - a }];
        let svg = TracePlot {
            title: &format!("episode {k} [{}, {})", e.start, e.end),
            input: window.as_ref(),
            scores: &scores[a..b],
            threshold: Some(detection.threshold),
            episodes: &local,
        }
        .to_svg();
        let path = plots.join(format!("episode_{k:02}.svg"));
        fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
    }
    let trace = plots.join("threshold.csv");
    fs::write(&trace, format!("threshold,anomaly_ratio\n{},{}\n", detection.threshold, detection.anomaly_ratio))
        .map_err(|e| Error::io(&trace, e))?;
    let table = rep.to_table(&run.file_name().map_or("run".into(), |s| s.to_string_lossy().into_owned()));
    let md = run.join("report.md");
    fs::write(&md, format!("```\n{table}```\n\nthreshold {:.6}, anomaly ratio {:.3}% ({:?})\n", detection.threshold, detection.anomaly_ratio, detection.ratio_source))
        .map_err(|e| Error::io(&md, e))?;
    print!("{table}");
    println!("plots in {}", plots.display());
    Ok(())
}
