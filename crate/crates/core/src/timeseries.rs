//! Pure statistics over raw metric series: windowing, window statistics,
//! min-max normalisation, sub-bin entropy and interquartile-range spike flags.
//!
//! Every function here is a pure function of its inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::RawSeries;

/// Default distribution window: one minute.
pub const DEFAULT_WINDOW_LEN: i64 = 60;

/// Number of equal-width sub-bins over `[0, 1]` used by [`entropy`].
pub const ENTROPY_SUB_BINS: usize = 10;

/// Multiplier applied to the interquartile range for the upper spike fence.
pub const IQR_FENCE: f64 = 1.5;

/// Raw samples whose timestamps fall in `[start, end)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowBin {
    pub start: i64,
    pub end: i64,
    pub values: Vec<f64>,
}

impl WindowBin {
    pub fn new(start: i64, end: i64, values: Vec<f64>) -> Self {
        Self { start, end, values }
    }

    pub fn stats(&self) -> Result<WindowStats> {
        window_stats(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub avg: f64,
    pub sd: f64,
}

/// Number of samples a complete window of `window_len` seconds holds.
pub fn samples_per_window(window_len: i64, sample_interval: i64) -> Result<usize> {
    if window_len <= 0 || sample_interval <= 0 || window_len % sample_interval != 0 {
        return Err(Error::InvalidInput(format!(
            "window length {window_len}s must be a positive multiple of the sample interval {sample_interval}s"
        )));
    }
    Ok((window_len / sample_interval) as usize)
}

/// Splits `series` into contiguous bins of `window_len` seconds aligned to the
/// first sample. Bins holding fewer than `window_len / sample_interval`
/// samples (the trailing remainder, or bins straddling a gap) are dropped.
pub fn partition_windows(series: &RawSeries, window_len: i64) -> Result<Vec<WindowBin>> {
    let per_window = samples_per_window(window_len, series.sample_interval())?;
    let origin = series
        .first_timestamp()
        .ok_or(Error::EmptyInput("series has no samples"))?;

    let mut bins = Vec::new();
    let mut current: Option<WindowBin> = None;
    for s in series.samples() {
        let idx = (s.timestamp - origin).div_euclid(window_len);
        let start = origin + idx * window_len;
        match current.as_mut() {
            Some(bin) if bin.start == start => bin.values.push(s.value),
            _ => {
                if let Some(done) = current.take() {
                    if done.values.len() >= per_window {
                        bins.push(done);
                    }
                }
                current = Some(WindowBin::new(start, start + window_len, vec![s.value]));
            }
        }
    }
    if let Some(done) = current {
        if done.values.len() >= per_window {
            bins.push(done);
        }
    }
    Ok(bins)
}

/// Arithmetic mean and sample standard deviation (n - 1 divisor, 0 for a
/// single value).
pub fn window_stats(bin: &WindowBin) -> Result<WindowStats> {
    stats_of(&bin.values)
}

pub(crate) fn stats_of(values: &[f64]) -> Result<WindowStats> {
    if values.is_empty() {
        return Err(Error::EmptyInput("window has no samples"));
    }
    // Welford
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &x) in values.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
    }
    let n = values.len();
    let sd = if n < 2 {
        0.0
    } else {
        (m2.max(0.0) / (n - 1) as f64).sqrt()
    };
    Ok(WindowStats { avg: mean, sd })
}

/// `(x - x_min) / (x_max - x_min)`, unclamped. Returns `None` when the range
/// is degenerate (`x_max == x_min`).
pub fn min_max_normalize(x: f64, x_min: f64, x_max: f64) -> Option<f64> {
    let range = x_max - x_min;
    if range > 0.0 {
        Some((x - x_min) / range)
    } else {
        None
    }
}

/// [`min_max_normalize`] with a degenerate range mapped to 0.0.
pub fn normalize_or_zero(x: f64, x_min: f64, x_max: f64) -> f64 {
    min_max_normalize(x, x_min, x_max).unwrap_or(0.0)
}

/// Shannon entropy (nats) of the bin's values over ten sub-bins of the
/// normalised range. `x_min`/`x_max` are the bounds of the whole raw data set;
/// values outside them are clamped into the first or last sub-bin.
pub fn entropy(bin: &WindowBin, x_min: f64, x_max: f64) -> Result<f64> {
    entropy_of(&bin.values, x_min, x_max)
}

pub(crate) fn entropy_of(values: &[f64], x_min: f64, x_max: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("window has no samples"));
    }
    let mut counts = [0usize; ENTROPY_SUB_BINS];
    for &x in values {
        counts[sub_bin(normalize_or_zero(x, x_min, x_max))] += 1;
    }
    let n = values.len() as f64;
    let h = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum::<f64>();
    Ok(h.max(0.0))
}

fn sub_bin(normalized: f64) -> usize {
    let v = normalized.clamp(0.0, 1.0);
    ((v * ENTROPY_SUB_BINS as f64) as usize).min(ENTROPY_SUB_BINS - 1)
}

/// Linear-interpolation quantile of already sorted data (`0 <= p <= 1`).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Indices of values strictly above `Q3 + 1.5 * IQR`. Only upward excursions
/// count as spikes.
pub fn iqr_spike_flags(values: &[f64]) -> Result<Vec<usize>> {
    if values.len() < 4 {
        return Err(Error::InsufficientData {
            what: "interquartile range",
            needed: 4,
            got: values.len(),
        });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&sorted, 0.25);
    let q3 = quantile_sorted(&sorted, 0.75);
    let fence = q3 + IQR_FENCE * (q3 - q1);
    Ok(values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > fence)
        .map(|(i, _)| i)
        .collect())
}
