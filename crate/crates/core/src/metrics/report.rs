use serde::{Deserialize, Serialize};

use super::{add_nrd, auc, episodes, point_adjust, prf1, vus, Curve, VusBuffer};
use crate::error::{Error, Result};

/// All detection metrics for one evaluated series.
///
/// `add` and `nrd` are absent when the labels contain no episode; the
/// threshold-free fields are absent when a score curve is undefined
/// (single-class labels).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub add: Option<f64>,
    pub nrd: Option<f64>,
    pub auc_roc: Option<f64>,
    pub auc_pr: Option<f64>,
    pub vus_roc: Option<f64>,
    pub vus_pr: Option<f64>,
    pub n_episodes: usize,
    pub n_detected: usize,
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x))
}

impl EvaluationReport {
    /// Point-adjusted P/R/F1, delays on raw predictions, and curve areas on
    /// the scores.
    pub fn compute(labels: &[u8], scores: &[f64], predictions: &[u8], buffer: VusBuffer) -> Result<Self> {
        if labels.len() != scores.len() || labels.len() != predictions.len() {
            return Err(Error::Shape(format!(
                "{} labels, {} scores, {} predictions",
                labels.len(),
                scores.len(),
                predictions.len()
            )));
        }
        let adjusted = point_adjust(labels, predictions)?;
        let p = prf1(labels, &adjusted)?;
        let eps = episodes(labels);
        let delay = add_nrd(&eps, predictions)?;
        let single_class = labels.iter().all(|&l| l == labels[0]);
        let (auc_roc, auc_pr, vus_roc, vus_pr) = if single_class {
            (None, None, None, None)
        } else {
            let (vr, vp) = vus(labels, scores, buffer)?;
            (Some(auc(labels, scores, Curve::Roc)?), Some(auc(labels, scores, Curve::Pr)?), Some(vr), Some(vp))
        };
        Ok(EvaluationReport {
            precision: p.precision,
            recall: p.recall,
            f1: p.f1,
            add: delay.map(|d| d.add),
            nrd: delay.map(|d| d.nrd),
            auc_roc,
            auc_pr,
            vus_roc,
            vus_pr,
            n_episodes: eps.len(),
            n_detected: delay.map_or(0, |d| d.n_detected),
        })
    }

    /// Aligned text table: point-adjusted P/R/F1, delays, then curve areas.
    /// Fractions are shown as percentages.
    pub fn to_table(&self, name: &str) -> String {
        let header = [
            "Dataset", "P", "R", "F1", "ADD", "NRD", "AUC-ROC", "AUC-PR", "VUS-ROC", "VUS-PR",
        ];
        let row = [
            name.to_string(),
            pct(Some(self.precision)),
            pct(Some(self.recall)),
            pct(Some(self.f1)),
            self.add.map_or_else(|| "-".into(), |a| format!("{a:.2}")),
            pct(self.nrd),
            pct(self.auc_roc),
            pct(self.auc_pr),
            pct(self.vus_roc),
            pct(self.vus_pr),
        ];
        let widths: Vec<usize> = header
            .iter()
            .zip(&row)
            .map(|(h, r)| h.len().max(r.len()))
            .collect();
        let line = |cells: Vec<String>| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        let mut out = line(header.iter().map(|s| s.to_string()).collect());
        out.push('\n');
        out.push_str(&"-".repeat(out.len() - 1));
        out.push('\n');
        out.push_str(&line(row.to_vec()));
        out.push('\n');
        out
    }
}
