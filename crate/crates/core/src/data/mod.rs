//! Series ingestion, normalization, windowing, synthetic generation and
//! anomaly-ratio selection.

mod gap;
mod io;
mod synthetic;

pub use gap::{gap_statistic_ratio, two_means_split, TwoMeansSplit};
pub use io::{load_series, load_series_unlabeled, write_labels, write_series, SeriesFormat};
pub use synthetic::{generate_synthetic, generate_synthetic_detailed, AnomalyKind, AnomalyMix, InjectedAnomaly, SyntheticSpec};

use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp applied to per-channel standard deviations.
pub const EPS_STD: f64 = 1e-8;

/// A raw multivariate series of `L` timesteps and `d` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSeries {
    pub values: Array2<f64>,
    pub labels: Option<Vec<u8>>,
    pub channel_names: Option<Vec<String>>,
    pub source: String,
}

impl LabeledSeries {
    pub fn new(values: Array2<f64>, source: impl Into<String>) -> Result<Self> {
        let series = LabeledSeries {
            values,
            labels: None,
            channel_names: None,
            source: source.into(),
        };
        series.validate()?;
        Ok(series)
    }

    pub fn with_labels(mut self, labels: Vec<u8>) -> Result<Self> {
        self.labels = Some(labels);
        self.validate()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (l, d) = self.values.dim();
        if l == 0 || d == 0 {
            return Err(Error::Shape(format!("series must be at least 1x1, got {l}x{d}")));
        }
        if let Some((row, col)) = first_non_finite(&self.values) {
            return Err(Error::NonFinite { row, col });
        }
        if let Some(labels) = &self.labels {
            if labels.len() != l {
                return Err(Error::Shape(format!(
                    "label length {} does not match series length {l}",
                    labels.len()
                )));
            }
            if let Some(i) = labels.iter().position(|&y| y > 1) {
                return Err(Error::InvalidInput(format!("label at row {i} is not 0/1")));
            }
        }
        if let Some(names) = &self.channel_names {
            if names.len() != d {
                return Err(Error::Shape(format!(
                    "{} channel names for {d} channels",
                    names.len()
                )));
            }
        }
        Ok(())
    }

    /// Rows `[start, end)` as a new series (labels sliced alongside).
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::InvalidInput(format!(
                "slice [{start}, {end}) out of range for length {}",
                self.len()
            )));
        }
        Ok(LabeledSeries {
            values: self.values.slice(s![start..end, ..]).to_owned(),
            labels: self.labels.as_ref().map(|y| y[start..end].to_vec()),
            channel_names: self.channel_names.clone(),
            source: format!("{}[{start}..{end})", self.source),
        })
    }
}

pub(crate) fn first_non_finite(values: &Array2<f64>) -> Option<(usize, usize)> {
    values
        .indexed_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(idx, _)| idx)
}

/// Per-channel z-score parameters, fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    /// Population mean/std per channel, std clamped to at least [`EPS_STD`].
    pub fn fit(series: &LabeledSeries) -> Self {
        let mean: Array1<f64> = series
            .values
            .mean_axis(Axis(0))
            .expect("validated series has rows");
        let std = series.values.std_axis(Axis(0), 0.0);
        NormalizationStats {
            mean: mean.to_vec(),
            std: std.iter().map(|s| s.max(EPS_STD)).collect(),
        }
    }

    pub fn identity(d: usize) -> Self {
        NormalizationStats {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, series: &LabeledSeries) -> Result<()> {
        if self.mean.len() != series.channels() || self.std.len() != series.channels() {
            return Err(Error::Shape(format!(
                "normalization stats have dimension {}, series has {} channels",
                self.mean.len(),
                series.channels()
            )));
        }
        Ok(())
    }
}

pub fn normalize(series: &LabeledSeries, stats: &NormalizationStats) -> Result<LabeledSeries> {
    stats.check(series)?;
    let mut out = series.clone();
    for (c, mut col) in out.values.axis_iter_mut(Axis(1)).enumerate() {
        let (m, s) = (stats.mean[c], stats.std[c].max(EPS_STD));
        col.mapv_inplace(|v| (v - m) / s);
    }
    Ok(out)
}

pub fn denormalize(series: &LabeledSeries, stats: &NormalizationStats) -> Result<LabeledSeries> {
    stats.check(series)?;
    let mut out = series.clone();
    for (c, mut col) in out.values.axis_iter_mut(Axis(1)).enumerate() {
        let (m, s) = (stats.mean[c], stats.std[c].max(EPS_STD));
        col.mapv_inplace(|v| v * s + m);
    }
    Ok(out)
}

/// One model input `x(0)` of shape `N x d`, cut from a parent series.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesWindow {
    pub x0: Array2<f64>,
    pub start_index: usize,
}

impl TimeSeriesWindow {
    pub fn len(&self) -> usize {
        self.x0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.nrows() == 0
    }

    pub fn end_index(&self) -> usize {
        self.start_index + self.len()
    }
}

/// Window start offsets for a series of length `l`.
///
/// Starts run `0, stride, 2*stride, ...`; when the last full window stops
/// short of `l`, a tail window `[l - n, l)` is appended.
pub fn window_starts(l: usize, n: usize, stride: usize) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::InvalidInput(format!("window length must be >= 2, got {n}")));
    }
    if stride == 0 || stride > n {
        return Err(Error::InvalidInput(format!(
            "stride must be in [1, {n}] so windows leave no gaps, got {stride}"
        )));
    }
    if n > l {
        return Err(Error::InvalidInput(format!(
            "window length {n} exceeds series length {l}"
        )));
    }
    let mut starts: Vec<usize> = (0..=l - n).step_by(stride).collect();
    let last = *starts.last().expect("at least one start");
    if last + n < l {
        starts.push(l - n);
    }
    Ok(starts)
}

pub fn window(series: &LabeledSeries, n: usize, stride: usize) -> Result<Vec<TimeSeriesWindow>> {
    let starts = window_starts(series.len(), n, stride)?;
    Ok(starts
        .into_iter()
        .map(|start| TimeSeriesWindow {
            x0: series.values.slice(s![start..start + n, ..]).to_owned(),
            start_index: start,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn series(values: Array2<f64>) -> LabeledSeries {
        LabeledSeries::new(values, "test").unwrap()
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let s = series(Array2::from_elem((5, 1), 3.5));
        let stats = NormalizationStats::fit(&s);
        assert_eq!(stats.std[0], EPS_STD);
        let z = normalize(&s, &stats).unwrap();
        assert!(z.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_stats_leave_values_unchanged() {
        let s = series(array![[1.0, -2.0], [0.5, 7.0]]);
        let z = normalize(&s, &NormalizationStats::identity(2)).unwrap();
        assert_eq!(z.values, s.values);
    }

    #[test]
    fn z_score_uses_population_std() {
        let s = series(array![[1.0], [2.0], [3.0]]);
        let z = normalize(&s, &NormalizationStats::fit(&s)).unwrap();
        let expected = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, b) in z.values.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_rejects_dimension_mismatch() {
        let s = series(array![[1.0, 2.0]]);
        let err = normalize(&s, &NormalizationStats::identity(3)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn tail_window_is_appended() {
        assert_eq!(window_starts(250, 100, 100).unwrap(), vec![0, 100, 150]);
        assert_eq!(window_starts(100, 100, 100).unwrap(), vec![0]);
        assert_eq!(window_starts(100, 100, 1).unwrap(), vec![0]);
        assert!(window_starts(99, 100, 1).is_err());
        assert!(window_starts(100, 10, 11).is_err());
    }

    #[test]
    fn windows_copy_rows() {
        let s = series(Array2::from_shape_fn((7, 2), |(i, j)| (i * 10 + j) as f64));
        let w = window(&s, 3, 3).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w[2].start_index, 4);
        assert_eq!(w[2].x0, array![[40.0, 41.0], [50.0, 51.0], [60.0, 61.0]]);
    }

    proptest! {
        #[test]
        fn windows_cover_every_index(l in 2usize..400, n_frac in 0.0f64..1.0, s_frac in 0.0f64..1.0) {
            let n = 2 + ((l - 2) as f64 * n_frac) as usize;
            let stride = 1 + ((n - 1) as f64 * s_frac) as usize;
            let starts = window_starts(l, n, stride).unwrap();
            let mut covered = vec![false; l];
            for &st in &starts {
                prop_assert!(st + n <= l);
                covered[st..st + n].iter_mut().for_each(|c| *c = true);
            }
            prop_assert!(covered.iter().all(|&c| c));
        }

        #[test]
        fn normalize_round_trips(vals in proptest::collection::vec(-1e3f64..1e3, 6..60)) {
            let l = vals.len() / 3;
            let values = Array2::from_shape_vec((l, 3), vals[..l * 3].to_vec()).unwrap();
            let s = series(values);
            let stats = NormalizationStats::fit(&s);
            let back = denormalize(&normalize(&s, &stats).unwrap(), &stats).unwrap();
            for (a, b) in back.values.iter().zip(s.values.iter()) {
                prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
            }
        }
    }
}
