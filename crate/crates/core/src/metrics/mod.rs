//! Detection-quality metrics: anomaly episodes, point-adjusted P/R/F1,
//! detection delay (ADD) and normalized response delay (NRD), threshold-free
//! AUC and range-aware VUS.

mod curves;
mod report;

pub use curves::{auc, soft_labels, vus, Curve, VusBuffer};
pub use report::EvaluationReport;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open anomaly episode `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventSpan {
    pub start: usize,
    pub end: usize,
}

impl EventSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Maximal runs of ones, in order.
pub fn episodes(labels: &[u8]) -> Vec<EventSpan> {
    let mut out = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &y) in labels.iter().enumerate() {
        match (y != 0, open) {
            (true, None) => open = Some(i),
            (false, Some(s)) => {
                out.push(EventSpan { start: s, end: i });
                open = None;
            }
            _ => {}
        }
    }
    if let Some(s) = open {
        out.push(EventSpan { start: s, end: labels.len() });
    }
    out
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("length mismatch: {a} labels vs {b} predictions")));
    }
    Ok(())
}

/// Marks a whole labeled episode as detected when any of its points is.
pub fn point_adjust(labels: &[u8], predictions: &[u8]) -> Result<Vec<u8>> {
    check_len(labels.len(), predictions.len())?;
    let mut adjusted: Vec<u8> = predictions.iter().map(|&p| (p != 0) as u8).collect();
    for ep in episodes(labels) {
        if adjusted[ep.start..ep.end].iter().any(|&p| p == 1) {
            adjusted[ep.start..ep.end].iter_mut().for_each(|p| *p = 1);
        }
    }
    Ok(adjusted)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Point-wise precision, recall and F1. Empty denominators yield 0.
pub fn prf1(labels: &[u8], predictions: &[u8]) -> Result<Prf1> {
    check_len(labels.len(), predictions.len())?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&y, &p) in labels.iter().zip(predictions) {
        match (y != 0, p != 0) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Prf1 { precision, recall, f1 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayMetrics {
    /// Mean delay in timesteps.
    pub add: f64,
    /// Mean delay as a fraction of episode duration.
    pub nrd: f64,
    pub n_detected: usize,
}

/// Detection delay per episode, measured on raw (unadjusted) predictions.
///
/// The first flagged index `T_i` inside episode `i` gives delay
/// `T_i - start` and normalized delay `(T_i - start) / (end - start)`.
/// A missed episode counts its full duration (normalized term 1).
/// Returns `None` when there are no episodes.
pub fn add_nrd(episodes: &[EventSpan], predictions: &[u8]) -> Result<Option<DelayMetrics>> {
    if episodes.is_empty() {
        return Ok(None);
    }
    let mut delay_sum = 0.0;
    let mut norm_sum = 0.0;
    let mut n_detected = 0;
    for ep in episodes {
        if ep.is_empty() || ep.end > predictions.len() {
            return Err(Error::InvalidInput(format!(
                "episode [{}, {}) invalid for {} predictions",
                ep.start,
                ep.end,
                predictions.len()
            )));
        }
        let duration = ep.len() as f64;
        match predictions[ep.start..ep.end].iter().position(|&p| p != 0) {
            Some(offset) => {
                n_detected += 1;
                delay_sum += offset as f64;
                norm_sum += offset as f64 / duration;
            }
            None => {
                delay_sum += duration;
                norm_sum += 1.0;
            }
        }
    }
    let n = episodes.len() as f64;
    Ok(Some(DelayMetrics {
        add: delay_sum / n,
        nrd: norm_sum / n,
        n_detected,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn episode_extraction() {
        assert_eq!(
            episodes(&[0, 1, 1, 0, 1]),
            vec![EventSpan { start: 1, end: 3 }, EventSpan { start: 4, end: 5 }]
        );
        assert!(episodes(&[0, 0, 0]).is_empty());
        assert_eq!(episodes(&[1; 5]), vec![EventSpan { start: 0, end: 5 }]);
    }

    #[test]
    fn adjustment_rules() {
        assert_eq!(point_adjust(&[0, 1, 1, 0], &[0, 0, 1, 0]).unwrap(), vec![0, 1, 1, 0]);
        assert_eq!(point_adjust(&[0, 1, 1, 0], &[0, 0, 0, 0]).unwrap(), vec![0, 0, 0, 0]);
        assert_eq!(point_adjust(&[0, 1, 1, 0], &[1, 0, 0, 0]).unwrap(), vec![1, 0, 0, 0]);
        assert!(point_adjust(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn prf1_cases() {
        let r = prf1(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        let r = prf1(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.5, 0.5, 0.5));
        let r = prf1(&[0, 0], &[0, 0]).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn delay_cases() {
        let mut preds = vec![0u8; 40];
        preds[15] = 1;
        let ep = [EventSpan { start: 10, end: 20 }];
        let m = add_nrd(&ep, &preds).unwrap().unwrap();
        assert_eq!((m.add, m.nrd, m.n_detected), (5.0, 0.5, 1));

        preds[10] = 1;
        let m = add_nrd(&ep, &preds).unwrap().unwrap();
        assert_eq!((m.add, m.nrd), (0.0, 0.0));

        let mut preds = vec![0u8; 40];
        preds[15] = 1;
        preds[25] = 1;
        let eps = [EventSpan { start: 10, end: 20 }, EventSpan { start: 25, end: 35 }];
        let m = add_nrd(&eps, &preds).unwrap().unwrap();
        assert_eq!((m.add, m.nrd, m.n_detected), (2.5, 0.25, 2));

        let m = add_nrd(&eps, &[0u8; 40]).unwrap().unwrap();
        assert_eq!((m.add, m.nrd, m.n_detected), (10.0, 1.0, 0));
        assert!(add_nrd(&[], &[0u8; 4]).unwrap().is_none());
    }

    fn bits(n: usize) -> impl Strategy<Value = Vec<u8>> {
        proptest::collection::vec(0u8..=1, n)
    }

    proptest! {
        #[test]
        fn point_adjust_idempotent_and_monotone((labels, preds, extra) in (1usize..120).prop_flat_map(|n| (bits(n), bits(n), bits(n)))) {
            let once = point_adjust(&labels, &preds).unwrap();
            prop_assert_eq!(point_adjust(&labels, &once).unwrap(), once.clone());
            let more: Vec<u8> = preds.iter().zip(&extra).map(|(a, b)| a | b).collect();
            let adj_more = point_adjust(&labels, &more).unwrap();
            for (a, b) in once.iter().zip(&adj_more) {
                prop_assert!(a <= b);
            }
        }

        #[test]
        fn f1_is_harmonic_mean((labels, preds) in (1usize..200).prop_flat_map(|n| (bits(n), bits(n)))) {
            let r = prf1(&labels, &preds).unwrap();
            for v in [r.precision, r.recall, r.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if r.precision + r.recall > 0.0 {
                let h = 2.0 * r.precision * r.recall / (r.precision + r.recall);
                prop_assert!((h - r.f1).abs() < 1e-12);
            }
        }
    }
}
