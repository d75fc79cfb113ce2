//! Per-point anomaly score, stitching of overlapping windows, and
//! ratio-based thresholding.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-point parts of the anomaly score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreParts {
    pub gain_weight: f64,
    pub rec_err: f64,
    pub center_dist: f64,
}

impl ScoreParts {
    pub fn score(&self) -> f64 {
        self.gain_weight * self.rec_err + self.center_dist
    }
}

/// `softmax(-gamma) * rec_err + center_dist`, point by point over one window.
pub fn window_anomaly_score(gamma: &[f64], rec_err: &[f64], center_dist: &[f64]) -> Result<Vec<ScoreParts>> {
    let n = gamma.len();
    if rec_err.len() != n || center_dist.len() != n {
        return Err(Error::Shape(format!(
            "score parts: gamma {n}, rec_err {}, center_dist {}",
            rec_err.len(),
            center_dist.len()
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let lo = gamma.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = gamma.iter().map(|&g| (-(g - lo)).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.iter()
        .zip(rec_err)
        .zip(center_dist)
        .map(|((&w, &r), &c)| ScoreParts { gain_weight: w / z, rec_err: r, center_dist: c })
        .collect())
}

/// Stitched per-point scores of a whole series.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyScoreSeries {
    pub scores: Vec<f64>,
    pub components: Vec<ScoreParts>,
}

impl AnomalyScoreSeries {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Writes `index,score,gain_weight,rec_err,center_dist,prediction`.
    pub fn write_csv(&self, path: &Path, predictions: Option<&[u8]>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        w.write_record(["index", "score", "gain_weight", "rec_err", "center_dist", "prediction"]).map_err(io)?;
        for (i, (s, c)) in self.scores.iter().zip(&self.components).enumerate() {
            let p = predictions.map_or(String::new(), |p| p[i].to_string());
            w.write_record([
                i.to_string(),
                s.to_string(),
                c.gain_weight.to_string(),
                c.rec_err.to_string(),
                c.center_dist.to_string(),
                p,
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Averages overlapping window scores into one value per point.
pub fn stitch(windows: &[Vec<ScoreParts>], starts: &[usize], len: usize) -> Result<AnomalyScoreSeries> {
    if windows.len() != starts.len() {
        return Err(Error::Shape(format!("{} windows but {} starts", windows.len(), starts.len())));
    }
    let mut acc = vec![ScoreParts::default(); len];
    let mut sums = vec![0.0; len];
    let mut count = vec![0usize; len];
    for (w, &s) in windows.iter().zip(starts) {
        if s + w.len() > len {
            return Err(Error::Shape(format!("window at {s} of length {} exceeds series length {len}", w.len())));
        }
        for (j, p) in w.iter().enumerate() {
            let a = &mut acc[s + j];
            a.gain_weight += p.gain_weight;
            a.rec_err += p.rec_err;
            a.center_dist += p.center_dist;
            sums[s + j] += p.score();
            count[s + j] += 1;
        }
    }
    if let Some(i) = count.iter().position(|&c| c == 0) {
        return Err(Error::CoverageGap(i));
    }
    for ((a, s), &c) in acc.iter_mut().zip(sums.iter_mut()).zip(&count) {
        let k = c as f64;
        a.gain_weight /= k;
        a.rec_err /= k;
        a.center_dist /= k;
        *s /= k;
    }
    Ok(AnomalyScoreSeries { scores: sums, components: acc })
}

/// Linear-interpolation percentile (`q` in [0, 100]).
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput("percentile of an empty set".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidInput("NaN in score pool".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 100.0) / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub threshold: f64,
    pub predictions: Vec<u8>,
    pub anomaly_ratio: f64,
}

impl DetectionResult {
    pub fn n_flagged(&self) -> usize {
        self.predictions.iter().filter(|&&p| p == 1).count()
    }
}

/// Threshold at the `(100 - ratio)` percentile of `pool`, applied with a
/// strict `>` to `scores`.
pub fn threshold_by_ratio(scores: &[f64], pool: &[f64], ratio: f64) -> Result<DetectionResult> {
    if !(ratio > 0.0 && ratio < 100.0) {
        return Err(Error::InvalidInput(format!("anomaly ratio {ratio} outside (0, 100)")));
    }
    if scores.is_empty() {
        return Err(Error::InvalidInput("no scores to threshold".into()));
    }
    let threshold = percentile(pool, 100.0 - ratio)?;
    let predictions = scores.iter().map(|&s| u8::from(s > threshold)).collect();
    Ok(DetectionResult { threshold, predictions, anomaly_ratio: ratio })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parts(gamma: &[f64], rec: &[f64], cd: &[f64]) -> Vec<f64> {
        window_anomaly_score(gamma, rec, cd).unwrap().iter().map(ScoreParts::score).collect()
    }

    #[test]
    fn score_examples() {
        let s = parts(&[2.0; 4], &[4.0, 8.0, 0.0, 1.0], &[0.5, 0.0, 0.0, 1.0]);
        assert_eq!(s, vec![1.5, 2.0, 0.0, 1.25]);
        let s = parts(&[0.0, 3f64.ln()], &[4.0, 4.0], &[0.0, 0.0]);
        assert!((s[0] - 3.0).abs() < 1e-12 && (s[1] - 1.0).abs() < 1e-12);
        assert_eq!(parts(&[0.3, 0.1], &[0.0, 0.0], &[0.0, 0.0]), vec![0.0, 0.0]);
        assert!(window_anomaly_score(&[0.0], &[1.0, 2.0], &[0.0]).is_err());
    }

    #[test]
    fn stitch_examples() {
        let p = |v: f64| ScoreParts { gain_weight: 1.0, rec_err: v, center_dist: 0.0 };
        let s = stitch(&[vec![p(1.0), p(1.0)], vec![p(2.0), p(2.0)]], &[0, 2], 4).unwrap();
        assert_eq!(s.scores, vec![1.0, 1.0, 2.0, 2.0]);
        let s = stitch(&[vec![p(1.0), p(1.0)], vec![p(3.0), p(3.0)]], &[0, 1], 3).unwrap();
        assert_eq!(s.scores, vec![1.0, 2.0, 3.0]);
        let e = stitch(&[vec![p(1.0), p(1.0)], vec![p(3.0)]], &[0, 3], 4).unwrap_err();
        assert!(matches!(e, Error::CoverageGap(2)));
    }

    #[test]
    fn threshold_examples() {
        let r = threshold_by_ratio(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0], 50.0).unwrap();
        assert_eq!(r.threshold, 2.5);
        assert_eq!(r.predictions, vec![0, 0, 1, 1]);
        // A vanishing ratio flags nothing; a tiny but resolvable one flags at most the maximum.
        let r = threshold_by_ratio(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0], 1e-15).unwrap();
        assert_eq!(r.n_flagged(), 0);
        let r = threshold_by_ratio(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0], 1e-9).unwrap();
        assert!(r.n_flagged() <= 1);
        let r = threshold_by_ratio(&[5.0; 10], &[5.0; 10], 10.0).unwrap();
        assert_eq!(r.n_flagged(), 0);
        assert!(threshold_by_ratio(&[], &[1.0], 1.0).is_err());
        assert!(threshold_by_ratio(&[1.0], &[1.0], 0.0).is_err());
        assert!(threshold_by_ratio(&[1.0], &[1.0], 100.0).is_err());
    }

    proptest! {
        #[test]
        fn weights_sum_to_one_and_shift_invariant(
            g in prop::collection::vec(-20.0f64..20.0, 1..60),
            shift in -50.0f64..50.0,
        ) {
            let n = g.len();
            let rec: Vec<f64> = (0..n).map(|i| i as f64 * 0.3).collect();
            let cd = vec![0.1; n];
            let a = window_anomaly_score(&g, &rec, &cd).unwrap();
            let total: f64 = a.iter().map(|p| p.gain_weight).sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            let gs: Vec<f64> = g.iter().map(|v| v + shift).collect();
            let b = window_anomaly_score(&gs, &rec, &cd).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x.score() - y.score()).abs() < 1e-9 * x.score().abs().max(1.0));
            }
        }

        #[test]
        fn rec_err_monotone(
            g in prop::collection::vec(-5.0f64..5.0, 2..30),
            i in 0usize..30,
            bump in 0.0f64..10.0,
        ) {
            let n = g.len();
            let i = i % n;
            let rec = vec![1.0; n];
            let mut more = rec.clone();
            more[i] += bump;
            let cd = vec![0.0; n];
            let a = window_anomaly_score(&g, &rec, &cd).unwrap();
            let b = window_anomaly_score(&g, &more, &cd).unwrap();
            prop_assert!(b[i].score() >= a[i].score());
        }

        #[test]
        fn flag_count_bounded(
            scores in prop::collection::vec(0u8..20, 1..300),
            ratio in 0.1f64..99.9,
        ) {
            let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
            let r = threshold_by_ratio(&s, &s, ratio).unwrap();
            let l = s.len();
            let ties = s.iter().filter(|&&v| v == r.threshold).count();
            prop_assert!(r.n_flagged() <= (ratio * l as f64 / 100.0).ceil() as usize + ties);
            for (p, v) in r.predictions.iter().zip(&s) {
                prop_assert_eq!(*p == 1, *v > r.threshold);
            }
        }
    }
}
