use serde::{Deserialize, Serialize};

use super::episodes;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Curve {
    Roc,
    Pr,
}

/// Buffer policy for [`vus`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VusBuffer {
    /// Average over buffers `0..=max`; `None` means the median episode length.
    Sweep { max: Option<usize> },
    /// A single buffer length.
    Fixed(usize),
}

impl Default for VusBuffer {
    fn default() -> Self {
        VusBuffer::Sweep { max: None }
    }
}

/// Indices sorted by descending score, grouped into runs of equal score.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// ROC and PR areas with per-point positive weights in `[0, 1]`.
///
/// Each point contributes `w` to the positive mass and `1 - w` to the
/// negative mass; confusion counts at each threshold are cumulative sums
/// of those masses over points scoring at or above it. ROC uses the
/// trapezoid rule, PR uses step interpolation (average precision).
fn weighted_areas(groups: &[Vec<usize>], weights: &[f64]) -> Result<(f64, f64)> {
    let pos_total: f64 = weights.iter().sum();
    let neg_total: f64 = weights.iter().map(|w| 1.0 - w).sum();
    if pos_total <= 0.0 || neg_total <= 0.0 {
        return Err(Error::InvalidInput(
            "curve areas need both positive and negative mass".into(),
        ));
    }
    let (mut tp, mut fp) = (0.0, 0.0);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let (mut roc, mut pr) = (0.0, 0.0);
    for g in groups {
        for &i in g {
            tp += weights[i];
            fp += 1.0 - weights[i];
        }
        let tpr = tp / pos_total;
        let fpr = fp / neg_total;
        roc += (fpr - prev_fpr) * (tpr + prev_tpr) * 0.5;
        if tp + fp > 0.0 {
            pr += (tpr - prev_tpr) * tp / (tp + fp);
        }
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Ok((roc.clamp(0.0, 1.0), pr.clamp(0.0, 1.0)))
}

fn check_scores(labels_len: usize, scores: &[f64]) -> Result<()> {
    if labels_len != scores.len() {
        return Err(Error::Shape(format!(
            "length mismatch: {labels_len} labels vs {} scores",
            scores.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::InvalidInput(format!("score {i} is not finite")));
    }
    Ok(())
}

/// Threshold-free area under the ROC or PR curve.
pub fn auc(labels: &[u8], scores: &[f64], curve: Curve) -> Result<f64> {
    check_scores(labels.len(), scores)?;
    let positives = labels.iter().filter(|&&y| y != 0).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::InvalidInput("AUC needs labels of both classes".into()));
    }
    let weights: Vec<f64> = labels.iter().map(|&y| (y != 0) as u8 as f64).collect();
    let (roc, pr) = weighted_areas(&tie_groups(scores), &weights)?;
    Ok(match curve {
        Curve::Roc => roc,
        Curve::Pr => pr,
    })
}

/// Continuous labels: 1 inside episodes, ramping as `1 - dist / (buffer + 1)`
/// over `buffer` points on either side; overlapping ramps take the max.
pub fn soft_labels(labels: &[u8], buffer: usize) -> Vec<f64> {
    let mut soft: Vec<f64> = labels.iter().map(|&y| (y != 0) as u8 as f64).collect();
    if buffer == 0 {
        return soft;
    }
    let n = labels.len();
    let denom = (buffer + 1) as f64;
    for ep in episodes(labels) {
        for dist in 1..=buffer {
            let v = 1.0 - dist as f64 / denom;
            if let Some(i) = ep.start.checked_sub(dist) {
                soft[i] = soft[i].max(v);
            }
            let j = ep.end - 1 + dist;
            if j < n {
                soft[j] = soft[j].max(v);
            }
        }
    }
    soft
}

/// Median episode length, rounded down, at least 1.
fn median_episode_length(labels: &[u8]) -> Option<usize> {
    let mut lens: Vec<usize> = episodes(labels).iter().map(|e| e.len()).collect();
    if lens.is_empty() {
        return None;
    }
    lens.sort_unstable();
    let m = lens.len();
    let median = if m % 2 == 1 { lens[m / 2] } else { (lens[m / 2 - 1] + lens[m / 2]) / 2 };
    Some(median.max(1))
}

/// Volume under the ROC and PR surfaces, `(vus_roc, vus_pr)`.
pub fn vus(labels: &[u8], scores: &[f64], buffer: VusBuffer) -> Result<(f64, f64)> {
    check_scores(labels.len(), scores)?;
    let median = median_episode_length(labels)
        .ok_or_else(|| Error::InvalidInput("VUS needs at least one anomaly episode".into()))?;
    let buffers: Vec<usize> = match buffer {
        VusBuffer::Sweep { max } => (0..=max.unwrap_or(median)).collect(),
        VusBuffer::Fixed(l) => vec![l],
    };
    let groups = tie_groups(scores);
    let (mut roc, mut pr) = (0.0, 0.0);
    for &l in &buffers {
        let (r, p) = weighted_areas(&groups, &soft_labels(labels, l))?;
        roc += r;
        pr += p;
    }
    let k = buffers.len() as f64;
    Ok((roc / k, pr / k))
}
