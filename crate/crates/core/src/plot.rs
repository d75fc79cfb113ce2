//! Minimal SVG line plots for score traces: input channels on top, anomaly
//! score with its threshold below, labeled episodes shaded in both.

use std::fmt::Write;

use ndarray::Array2;

use crate::metrics::EventSpan;

const WIDTH: f64 = 1200.0;
const PANEL_H: f64 = 220.0;
const MARGIN: f64 = 40.0;
const COLORS: [&str; 6] = ["#1f77b4", "#2ca02c", "#9467bd", "#8c564b", "#17becf", "#7f7f7f"];
/// Channels drawn in the input panel.
pub const MAX_CHANNELS: usize = 6;
/// Longer series are reduced to per-bucket min and max before drawing.
const MAX_POINTS: usize = 4000;

pub struct TracePlot<'a> {
    pub title: &'a str,
    pub input: Option<&'a Array2<f64>>,
    pub scores: &'a [f64],
    pub threshold: Option<f64>,
    pub episodes: &'a [EventSpan],
}

struct Panel {
    top: f64,
    lo: f64,
    hi: f64,
    len: usize,
}

impl Panel {
    fn x(&self, i: f64) -> f64 {
        MARGIN + (WIDTH - 2.0 * MARGIN) * i / (self.len.max(2) - 1) as f64
    }

    fn y(&self, v: f64) -> f64 {
        let span = if self.hi > self.lo { self.hi - self.lo } else { 1.0 };
        self.top + PANEL_H - (v - self.lo) / span * PANEL_H
    }
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo.is_finite() { (lo, hi) } else { (0.0, 1.0) }
}

/// Indices to draw: everything for short series, otherwise the min and max
/// of each bucket so spikes survive.
fn decimate(values: &[f64]) -> Vec<usize> {
    if values.len() <= MAX_POINTS {
        return (0..values.len()).collect();
    }
    let buckets = MAX_POINTS / 2;
    let size = values.len().div_ceil(buckets);
    let mut out = Vec::with_capacity(MAX_POINTS);
    for start in (0..values.len()).step_by(size) {
        let end = (start + size).min(values.len());
        let (mut lo, mut hi) = (start, start);
        for i in start..end {
            if values[i] < values[lo] {
                lo = i;
            }
            if values[i] > values[hi] {
                hi = i;
            }
        }
        out.push(lo.min(hi));
        if lo != hi {
            out.push(lo.max(hi));
        }
    }
    out
}

fn polyline(svg: &mut String, p: &Panel, values: &[f64], color: &str) {
    let mut pts = String::new();
    for i in decimate(values) {
        let v = values[i];
        if v.is_finite() {
            let _ = write!(pts, "{:.1},{:.1} ", p.x(i as f64), p.y(v));
        }
    }
    let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="1" points="{}"/>"#, pts.trim_end());
}

fn frame(svg: &mut String, p: &Panel, label: &str, episodes: &[EventSpan]) {
    for e in episodes {
        let x0 = p.x(e.start as f64);
        let x1 = p.x((e.end - 1) as f64).max(x0 + 1.0);
        let _ = writeln!(
            svg,
            r##"<rect x="{x0:.1}" y="{:.1}" width="{:.1}" height="{PANEL_H}" fill="#d62728" fill-opacity="0.15"/>"##,
            p.top,
            x1 - x0
        );
    }
    let _ = writeln!(
        svg,
        r##"<rect x="{MARGIN}" y="{:.1}" width="{:.1}" height="{PANEL_H}" fill="none" stroke="#333"/>"##,
        p.top,
        WIDTH - 2.0 * MARGIN
    );
    let _ = writeln!(svg, r#"<text x="{MARGIN}" y="{:.1}" font-size="12" font-family="sans-serif">{label}</text>"#, p.top - 6.0);
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" font-size="10" font-family="sans-serif" text-anchor="end">{:.3}</text>"#,
        MARGIN - 4.0,
        p.top + 10.0,
        p.hi
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" font-size="10" font-family="sans-serif" text-anchor="end">{:.3}</text>"#,
        MARGIN - 4.0,
        p.top + PANEL_H,
        p.lo
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl TracePlot<'_> {
    pub fn to_svg(&self) -> String {
        let len = self.scores.len();
        let panels = if self.input.is_some() { 2.0 } else { 1.0 };
        let height = panels * (PANEL_H + MARGIN) + MARGIN;
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}">"#
        );
        let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="18" font-size="14" font-family="sans-serif" text-anchor="middle">{}</text>"#,
            WIDTH / 2.0,
            escape(self.title)
        );
        let mut top = MARGIN;
        if let Some(x) = self.input {
            let shown = x.ncols().min(MAX_CHANNELS);
            let (lo, hi) = bounds(x.columns().into_iter().take(shown).flat_map(|c| c.to_vec()));
            let p = Panel { top, lo, hi, len: x.nrows() };
            frame(&mut svg, &p, "input", self.episodes);
            for (k, col) in x.columns().into_iter().take(shown).enumerate() {
                polyline(&mut svg, &p, &col.to_vec(), COLORS[k % COLORS.len()]);
            }
            top += PANEL_H + MARGIN;
        }
        let (lo, mut hi) = bounds(self.scores.iter().copied());
        if let Some(t) = self.threshold.filter(|t| t.is_finite()) {
            hi = hi.max(t);
        }
        let p = Panel { top, lo: lo.min(0.0), hi, len };
        frame(&mut svg, &p, "anomaly score", self.episodes);
        polyline(&mut svg, &p, self.scores, "#ff7f0e");
        if let Some(t) = self.threshold.filter(|t| t.is_finite()) {
            let y = p.y(t);
            let _ = writeln!(
                svg,
                r##"<line x1="{MARGIN}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#d62728" stroke-dasharray="6,4"/>"##,
                WIDTH - MARGIN
            );
        }
        svg.push_str("</svg>\n");
        svg
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn svg_structure() {
        let x = array![[0.0, 1.0], [1.0, 0.0], [0.5, 0.5], [2.0, -1.0]];
        let scores = [0.1, 0.2, 5.0, 0.3];
        let eps = [EventSpan { start: 2, end: 3 }];
        let svg = TracePlot { title: "a<b", input: Some(&x), scores: &scores, threshold: Some(1.0), episodes: &eps }.to_svg();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert_eq!(svg.matches("stroke-dasharray").count(), 1);
        assert!(svg.contains("a&lt;b"));
        let bare = TracePlot { title: "s", input: None, scores: &scores, threshold: None, episodes: &[] }.to_svg();
        assert_eq!(bare.matches("<polyline").count(), 1);
    }

    #[test]
    fn decimation_keeps_extremes() {
        let mut v = vec![0.0; 100_000];
        v[54_321] = 9.0;
        let idx = decimate(&v);
        assert!(idx.len() <= MAX_POINTS);
        assert!(idx.contains(&54_321));
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
    }
}
