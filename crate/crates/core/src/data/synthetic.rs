use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::LabeledSeries;
use crate::error::{Error, Result};

/// Upper bound on the anomalous fraction of a generated series.
pub const MAX_ANOMALY_FRACTION: f64 = 0.20;

/// Half-width of the neighbourhood used for contextual anomalies.
const LOCAL_HALF_WIDTH: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyKind {
    Global,
    Contextual,
    Shapelet,
    Seasonal,
    Trend,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 5] = [
        AnomalyKind::Global,
        AnomalyKind::Contextual,
        AnomalyKind::Shapelet,
        AnomalyKind::Seasonal,
        AnomalyKind::Trend,
    ];

    pub fn is_point(self) -> bool {
        matches!(self, AnomalyKind::Global | AnomalyKind::Contextual)
    }
}

/// Number of injected anomalies per class.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnomalyMix {
    pub global: usize,
    pub contextual: usize,
    pub shapelet: usize,
    pub seasonal: usize,
    pub trend: usize,
}

impl AnomalyMix {
    pub fn count(&self, kind: AnomalyKind) -> usize {
        match kind {
            AnomalyKind::Global => self.global,
            AnomalyKind::Contextual => self.contextual,
            AnomalyKind::Shapelet => self.shapelet,
            AnomalyKind::Seasonal => self.seasonal,
            AnomalyKind::Trend => self.trend,
        }
    }

    pub fn total(&self) -> usize {
        AnomalyKind::ALL.iter().map(|&k| self.count(k)).sum()
    }
}

/// Parameters of a synthetic labeled series.
///
/// Each channel is a sum of two sinusoids with seeded periods and phases,
/// plus Gaussian noise of standard deviation `noise`. The first
/// `clean_prefix` points never receive anomalies so they can serve as a
/// training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub length: usize,
    pub channels: usize,
    pub clean_prefix: usize,
    pub amplitude: f64,
    pub period_range: (f64, f64),
    pub noise: f64,
    pub mix: AnomalyMix,
    /// Inclusive span-length range for shapelet, seasonal and trend anomalies.
    pub anomaly_length: (usize, usize),
    /// Strength multiplier for injected deviations.
    pub magnitude: f64,
    /// Fraction of channels touched by each anomaly (at least one).
    pub channel_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            length: 2000,
            channels: 1,
            clean_prefix: 0,
            amplitude: 1.0,
            period_range: (20.0, 60.0),
            noise: 0.05,
            mix: AnomalyMix::default(),
            anomaly_length: (8, 16),
            magnitude: 1.0,
            channel_fraction: 0.5,
            seed: 0,
        }
    }
}

/// Record of one injected anomaly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectedAnomaly {
    pub kind: AnomalyKind,
    pub start: usize,
    pub len: usize,
    pub channels: Vec<usize>,
}

struct ChannelSignal {
    periods: [f64; 2],
    phases: [f64; 2],
    weights: [f64; 2],
}

impl ChannelSignal {
    fn at(&self, t: f64, amplitude: f64) -> f64 {
        let v: f64 = (0..2)
            .map(|k| self.weights[k] * (2.0 * PI * t / self.periods[k] + self.phases[k]).sin())
            .sum();
        amplitude * v / (self.weights[0] + self.weights[1])
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.length < 2 || self.channels == 0 {
            return Err(Error::InvalidInput(format!(
                "synthetic series needs length >= 2 and channels >= 1, got {}x{}",
                self.length, self.channels
            )));
        }
        let (lo, hi) = self.anomaly_length;
        if lo == 0 || lo > hi {
            return Err(Error::InvalidInput(format!(
                "anomaly_length range ({lo}, {hi}) is empty"
            )));
        }
        let (p_lo, p_hi) = self.period_range;
        if !(p_lo >= 2.0 && p_lo <= p_hi) {
            return Err(Error::InvalidInput(format!(
                "period_range ({p_lo}, {p_hi}) must satisfy 2 <= lo <= hi"
            )));
        }
        if !(self.noise >= 0.0 && self.amplitude > 0.0 && self.magnitude > 0.0) {
            return Err(Error::InvalidInput(
                "noise must be >= 0, amplitude and magnitude > 0".into(),
            ));
        }
        if self.clean_prefix >= self.length {
            return Err(Error::InvalidInput("clean_prefix must be < length".into()));
        }
        Ok(())
    }

    fn worst_case_points(&self) -> usize {
        AnomalyKind::ALL
            .iter()
            .map(|&k| {
                let per = if k.is_point() { 1 } else { self.anomaly_length.1 };
                self.mix.count(k) * per
            })
            .sum()
    }
}

/// Generates a labeled series with the requested anomaly mix.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<LabeledSeries> {
    generate_synthetic_detailed(spec).map(|(s, _)| s)
}

/// As [`generate_synthetic`], also returning what was injected where.
pub fn generate_synthetic_detailed(
    spec: &SyntheticSpec,
) -> Result<(LabeledSeries, Vec<InjectedAnomaly>)> {
    spec.validate()?;
    let region = spec.length - spec.clean_prefix;
    if spec.worst_case_points() as f64 > MAX_ANOMALY_FRACTION * region as f64 {
        return Err(Error::InvalidInput(format!(
            "anomaly mix infeasible: up to {} anomalous points exceed {:.0}% of the {region} eligible points",
            spec.worst_case_points(),
            MAX_ANOMALY_FRACTION * 100.0
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (l, d) = (spec.length, spec.channels);
    let (p_lo, p_hi) = spec.period_range;
    let signals: Vec<ChannelSignal> = (0..d)
        .map(|_| ChannelSignal {
            periods: [rng.random_range(p_lo..=p_hi), rng.random_range(p_lo..=p_hi) * 0.5],
            phases: [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)],
            weights: [1.0, rng.random_range(0.2..0.6)],
        })
        .collect();

    let mut values = Array2::from_shape_fn((l, d), |(i, c)| signals[c].at(i as f64, spec.amplitude));
    for v in values.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v += spec.noise * z;
    }

    let ranges: Vec<(f64, f64)> = values
        .columns()
        .into_iter()
        .map(|col| {
            col.iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
        })
        .collect();
    let plan = place_anomalies(spec, &mut rng)?;
    let mut labels = vec![0u8; l];
    let mut injected = Vec::with_capacity(plan.len());
    let k_channels = ((spec.channel_fraction * d as f64).round() as usize).clamp(1, d);

    for (kind, start, len) in plan {
        let mut channels: Vec<usize> = (0..d).collect();
        for i in 0..k_channels {
            let j = rng.random_range(i..d);
            channels.swap(i, j);
        }
        channels.truncate(k_channels);
        channels.sort_unstable();

        for &c in &channels {
            inject(spec, &signals[c], ranges[c], &mut values, c, kind, start, len, &mut rng);
        }
        labels[start..start + len].iter_mut().for_each(|y| *y = 1);
        injected.push(InjectedAnomaly {
            kind,
            start,
            len,
            channels,
        });
    }

    let series = LabeledSeries {
        values,
        labels: Some(labels),
        channel_names: None,
        source: format!("synthetic(seed={})", spec.seed),
    };
    series.validate()?;
    Ok((series, injected))
}

fn place_anomalies(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Vec<(AnomalyKind, usize, usize)>> {
    let (lo, hi) = spec.anomaly_length;
    let margin = hi.max(LOCAL_HALF_WIDTH + 1);
    let first = spec.clean_prefix + margin;
    let mut placed: Vec<(AnomalyKind, usize, usize)> = Vec::new();
    for kind in AnomalyKind::ALL {
        for _ in 0..spec.mix.count(kind) {
            let len = if kind.is_point() { 1 } else { rng.random_range(lo..=hi) };
            if first + len + margin > spec.length {
                return Err(infeasible(spec));
            }
            let last = spec.length - len - margin;
            let mut ok = false;
            for _ in 0..10_000 {
                let start = rng.random_range(first..=last);
                let clear = placed.iter().all(|&(_, s, n)| {
                    start + len + margin <= s || s + n + margin <= start
                });
                if clear {
                    placed.push((kind, start, len));
                    ok = true;
                    break;
                }
            }
            if !ok {
                return Err(infeasible(spec));
            }
        }
    }
    Ok(placed)
}

fn infeasible(spec: &SyntheticSpec) -> Error {
    Error::InvalidInput(format!(
        "anomaly mix infeasible: cannot place {} separated anomalies in {} points",
        spec.mix.total(),
        spec.length - spec.clean_prefix
    ))
}

#[allow(clippy::too_many_arguments)]
fn inject(
    spec: &SyntheticSpec,
    signal: &ChannelSignal,
    (gmin, gmax): (f64, f64),
    values: &mut Array2<f64>,
    c: usize,
    kind: AnomalyKind,
    start: usize,
    len: usize,
    rng: &mut ChaCha8Rng,
) {
    let amp = spec.amplitude;
    let sigma = spec.noise;
    let col: Vec<f64> = values.column(c).to_vec();
    let noise = |rng: &mut ChaCha8Rng| -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        sigma * z
    };

    match kind {
        AnomalyKind::Global => {
            let m = 5.0 * sigma + 0.5 * spec.magnitude * amp;
            let up: bool = rng.random_bool(0.5);
            values[[start, c]] = if up { gmax + m } else { gmin - m };
        }
        AnomalyKind::Contextual => {
            let lo = start.saturating_sub(LOCAL_HALF_WIDTH);
            let hi = (start + LOCAL_HALF_WIDTH + 1).min(col.len());
            let neighbours: Vec<f64> = (lo..hi).filter(|&i| i != start).map(|i| col[i]).collect();
            let local_mean = neighbours.iter().sum::<f64>() / neighbours.len() as f64;
            let inset = 0.1 * (gmax - gmin);
            let low = gmin + inset;
            let high = gmax - inset;
            let v = if (high - local_mean).abs() >= (local_mean - low).abs() { high } else { low };
            // Never closer than 4 sigma to the local mean, never outside the global range.
            let min_dev = 4.0 * sigma;
            let v = if (v - local_mean).abs() < min_dev {
                let sign = if v >= local_mean { 1.0 } else { -1.0 };
                (local_mean + sign * min_dev).clamp(gmin, gmax)
            } else {
                v
            };
            values[[start, c]] = v;
        }
        AnomalyKind::Shapelet => {
            let period = signal.periods[0].min(len as f64 * 2.0).max(4.0);
            let phase = rng.random_range(0.0..2.0 * PI);
            let centre = col[start..start + len].iter().sum::<f64>() / len as f64;
            for (k, i) in (start..start + len).enumerate() {
                let square = (2.0 * PI * k as f64 / period + phase).sin().signum();
                values[[i, c]] = centre + amp * square + noise(rng);
            }
        }
        AnomalyKind::Seasonal => {
            let factor = rng.random_range(2.0..3.0);
            for (k, i) in (start..start + len).enumerate() {
                let warped = start as f64 + factor * k as f64;
                values[[i, c]] = signal.at(warped, amp) + noise(rng);
            }
        }
        AnomalyKind::Trend => {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let drift = sign * spec.magnitude * amp * rng.random_range(1.0..1.5);
            for (k, i) in (start..start + len).enumerate() {
                values[[i, c]] += drift * (k + 1) as f64 / len as f64;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(mix: AnomalyMix) -> SyntheticSpec {
        SyntheticSpec {
            length: 1000,
            channels: 3,
            mix,
            seed: 11,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn empty_mix_has_no_labels() {
        let s = generate_synthetic(&base(AnomalyMix::default())).unwrap();
        assert!(s.labels.unwrap().iter().all(|&y| y == 0));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let mix = AnomalyMix { global: 2, contextual: 2, shapelet: 1, seasonal: 1, trend: 1 };
        let a = generate_synthetic(&base(mix.clone())).unwrap();
        let b = generate_synthetic(&base(mix)).unwrap();
        assert_eq!(a, b);
        let bits = |s: &LabeledSeries| s.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn single_global_spike_clears_five_sigma() {
        let spec = SyntheticSpec {
            length: 500,
            channels: 1,
            amplitude: 1.0,
            noise: 0.05,
            mix: AnomalyMix { global: 1, ..AnomalyMix::default() },
            seed: 3,
            ..SyntheticSpec::default()
        };
        let s = generate_synthetic(&spec).unwrap();
        let labels = s.labels.as_ref().unwrap();
        let flagged: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
        assert_eq!(flagged.len(), 1);
        assert!(s.values[[flagged[0], 0]].abs() >= 1.25);
    }

    #[test]
    fn label_count_matches_injected_points() {
        let mix = AnomalyMix { global: 3, contextual: 3, shapelet: 2, seasonal: 2, trend: 2 };
        let (s, injected) = generate_synthetic_detailed(&base(mix)).unwrap();
        let labelled = s.labels.unwrap().iter().filter(|&&y| y == 1).count();
        assert_eq!(labelled, injected.iter().map(|a| a.len).sum::<usize>());
        assert_eq!(injected.len(), 12);
    }

    #[test]
    fn contextual_points_stay_in_range_and_far_from_neighbours() {
        let spec = SyntheticSpec {
            length: 800,
            channels: 1,
            noise: 0.05,
            mix: AnomalyMix { contextual: 4, ..AnomalyMix::default() },
            seed: 5,
            ..SyntheticSpec::default()
        };
        let clean = generate_synthetic(&SyntheticSpec { mix: AnomalyMix::default(), ..spec.clone() }).unwrap();
        let (s, injected) = generate_synthetic_detailed(&spec).unwrap();
        let col = clean.values.column(0);
        let (gmin, gmax) = col.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        for a in injected {
            let v = s.values[[a.start, 0]];
            assert!(v >= gmin - 1e-12 && v <= gmax + 1e-12);
            let neigh: Vec<f64> = (a.start - 5..=a.start + 5)
                .filter(|&i| i != a.start)
                .map(|i| s.values[[i, 0]])
                .collect();
            let mean = neigh.iter().sum::<f64>() / neigh.len() as f64;
            assert!((v - mean).abs() >= 4.0 * 0.05);
        }
    }

    #[test]
    fn overfull_mix_is_rejected() {
        let spec = SyntheticSpec {
            length: 100,
            mix: AnomalyMix { trend: 5, ..AnomalyMix::default() },
            anomaly_length: (10, 10),
            ..SyntheticSpec::default()
        };
        assert!(matches!(generate_synthetic(&spec), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn clean_prefix_is_respected() {
        let spec = SyntheticSpec {
            length: 2000,
            clean_prefix: 1000,
            mix: AnomalyMix { global: 5, trend: 3, ..AnomalyMix::default() },
            ..SyntheticSpec::default()
        };
        let s = generate_synthetic(&spec).unwrap();
        assert!(s.labels.unwrap()[..1000].iter().all(|&y| y == 0));
    }
}
