//! Score distribution summaries.
//!
//! Quantiles use linear interpolation between order statistics: for `N`
//! sorted values `x_0..x_{N-1}` and level `q`, with `h = (N − 1)·q`, the
//! quantile is `x_⌊h⌋ + (h − ⌊h⌋)·(x_⌈h⌉ − x_⌊h⌋)`. Up to
//! [`EXACT_LIMIT`] values this is computed exactly; above it a fixed-width
//! histogram with [`STREAM_BINS`] bins gives estimates accurate to one bin
//! width, which is reported as `error_bound`.

use serde::{Deserialize, Serialize};

use super::EvalError;

pub const EXACT_LIMIT: usize = 10_000_000;
pub const STREAM_BINS: usize = 1 << 20;
pub const DISPLAY_BINS: usize = 20;
pub const STANDARD_QUANTILES: [f64; 9] = [0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95, 0.99];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// `(level, value)` pairs.
    pub quantiles: Vec<(f64, f64)>,
    /// Counts over `DISPLAY_BINS` equal-width bins spanning `[min, max]`.
    pub histogram: Vec<u64>,
    pub exact: bool,
    /// Largest possible quantile error; 0 when exact.
    pub error_bound: f64,
}

impl ScoreStats {
    pub fn quantile(&self, level: f64) -> Option<f64> {
        self.quantiles
            .iter()
            .find(|(q, _)| *q == level)
            .map(|&(_, v)| v)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "count {}\nmin {:?}\nmax {:?}\nmean {:?}\nexact {}\nerror_bound {:?}\n",
            self.count, self.min, self.max, self.mean, self.exact, self.error_bound
        );
        for (q, v) in &self.quantiles {
            s.push_str(&format!("q{q} {v:?}\n"));
        }
        let width = (self.max - self.min) / self.histogram.len() as f64;
        for (i, c) in self.histogram.iter().enumerate() {
            s.push_str(&format!("bin {:?} {c}\n", self.min + width * i as f64));
        }
        s
    }
}

pub fn score_stats(scores: &[f64], levels: &[f64]) -> Result<ScoreStats, EvalError> {
    score_stats_with_limit(scores, levels, EXACT_LIMIT)
}

/// As [`score_stats`], switching to histogram estimates above `limit`.
pub fn score_stats_with_limit(
    scores: &[f64],
    levels: &[f64],
    limit: usize,
) -> Result<ScoreStats, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::EmptyTable);
    }
    let n = scores.len();
    let (mut min, mut max, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for &s in scores {
        min = min.min(s);
        max = max.max(s);
        sum += s;
    }
    let histogram = bin_counts(scores, min, max, DISPLAY_BINS);
    let (quantiles, exact, error_bound) = if n <= limit {
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        let q = levels
            .iter()
            .map(|&l| (l, interpolate(l, n, |i| sorted[i])))
            .collect();
        (q, true, 0.0)
    } else {
        let counts = bin_counts(scores, min, max, STREAM_BINS);
        let width = (max - min) / STREAM_BINS as f64;
        let mut cumulative = Vec::with_capacity(counts.len());
        let mut acc = 0u64;
        for c in &counts {
            acc += c;
            cumulative.push(acc);
        }
        // Order statistic i is estimated by the midpoint of its bin.
        let order_stat = |i: usize| {
            let b = cumulative.partition_point(|&c| c <= i as u64);
            min + width * (b as f64 + 0.5)
        };
        let q = levels.iter().map(|&l| (l, interpolate(l, n, order_stat))).collect();
        (q, false, width)
    };
    Ok(ScoreStats {
        count: n,
        min,
        max,
        mean: sum / n as f64,
        quantiles,
        histogram,
        exact,
        error_bound,
    })
}

fn interpolate(level: f64, n: usize, x: impl Fn(usize) -> f64) -> f64 {
    let h = (n - 1) as f64 * level.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let a = x(lo);
    if hi == lo {
        a
    } else {
        a + (h - lo as f64) * (x(hi) - a)
    }
}

fn bin_counts(scores: &[f64], min: f64, max: f64, bins: usize) -> Vec<u64> {
    let mut counts = vec![0u64; bins];
    let span = max - min;
    for &s in scores {
        let b = if span > 0.0 {
            (((s - min) / span) * bins as f64) as usize
        } else {
            0
        };
        counts[b.min(bins - 1)] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_value() {
        let s = score_stats(&[2.5], &STANDARD_QUANTILES).unwrap();
        assert_eq!((s.min, s.max, s.mean), (2.5, 2.5, 2.5));
        assert!(s.quantiles.iter().all(|&(_, v)| v == 2.5));
        assert_eq!(s.histogram.iter().sum::<u64>(), 1);
    }

    #[test]
    fn one_to_hundred() {
        let xs: Vec<f64> = (1..=100).rev().map(f64::from).collect();
        let s = score_stats(&xs, &[0.5, 0.9]).unwrap();
        assert!((s.quantile(0.5).unwrap() - 50.5).abs() < 1e-12);
        assert!((s.quantile(0.9).unwrap() - 90.1).abs() < 1e-12);
        assert_eq!(s.mean, 50.5);
    }

    #[test]
    fn empty() {
        assert!(matches!(score_stats(&[], &[0.5]), Err(EvalError::EmptyTable)));
    }
}
