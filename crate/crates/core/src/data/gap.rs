use crate::error::{Error, Result};

/// Minimum pool size accepted by [`gap_statistic_ratio`].
pub const MIN_GAP_SCORES: usize = 100;

/// Optimal two-cluster partition of a 1-D sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoMeansSplit {
    /// Midpoint between the largest lower-cluster value and the smallest
    /// upper-cluster value.
    pub dividing_value: f64,
    pub lower_count: usize,
    pub upper_count: usize,
    pub lower_mean: f64,
    pub upper_mean: f64,
}

/// Exact 1-D k-means with k = 2.
///
/// In one dimension the optimal clusters are contiguous in sorted order, so
/// every split point is scored by its within-cluster sum of squares using
/// prefix sums and the minimum is taken. Ties go to the lowest split index.
pub fn two_means_split(scores: &[f64]) -> Result<TwoMeansSplit> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("scores must be finite".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n < 2 || sorted[0] == sorted[n - 1] {
        return Err(Error::Degenerate(
            "all scores are identical, no two-cluster partition exists; \
             fall back to the configured default anomaly ratio"
                .into(),
        ));
    }
    // Shift by the median for numerical stability of the sum-of-squares form.
    let shift = sorted[n / 2];
    let mut prefix = Vec::with_capacity(n + 1);
    let mut prefix_sq = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    prefix_sq.push(0.0);
    for &v in &sorted {
        let v = v - shift;
        prefix.push(prefix.last().unwrap() + v);
        prefix_sq.push(prefix_sq.last().unwrap() + v * v);
    }
    let sse = |a: usize, b: usize| {
        let m = (b - a) as f64;
        let s = prefix[b] - prefix[a];
        prefix_sq[b] - prefix_sq[a] - s * s / m
    };

    let mut best: Option<(f64, usize)> = None;
    for k in 1..n {
        // Splitting between equal values is never better than at a boundary.
        if sorted[k - 1] == sorted[k] {
            continue;
        }
        let cost = sse(0, k) + sse(k, n);
        if best.is_none_or(|(c, _)| cost < c) {
            best = Some((cost, k));
        }
    }
    let (_, k) = best.expect("non-constant input has a boundary");
    Ok(TwoMeansSplit {
        dividing_value: 0.5 * (sorted[k - 1] + sorted[k]),
        lower_count: k,
        upper_count: n - k,
        lower_mean: prefix[k] / k as f64 + shift,
        upper_mean: (prefix[n] - prefix[k]) / (n - k) as f64 + shift,
    })
}

/// Anomaly ratio, in percent, chosen by a two-cluster partition of the
/// training anomaly scores: the share of scores in the upper cluster.
pub fn gap_statistic_ratio(train_scores: &[f64]) -> Result<f64> {
    if train_scores.len() < MIN_GAP_SCORES {
        return Err(Error::InvalidInput(format!(
            "gap statistic needs at least {MIN_GAP_SCORES} scores, got {}",
            train_scores.len()
        )));
    }
    if let Some(i) = train_scores.iter().position(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::InvalidInput(format!(
            "score {i} is negative or non-finite"
        )));
    }
    let split = two_means_split(train_scores)?;
    Ok(100.0 * split.upper_count as f64 / train_scores.len() as f64)
}
