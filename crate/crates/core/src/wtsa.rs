//! Window-based time series analysis: turns raw metric history into the
//! normalised training set (with artificial spike instances) and turns the
//! most recent window into a normalised test instance.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::RawSeries;
use crate::timeseries::{self, normalize_or_zero, WindowBin};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Window average only (baseline).
    AverageOnly,
    /// Window entropy only (baseline).
    EntropyOnly,
    /// Window (average, standard deviation).
    AvgSd,
}

impl FeatureMode {
    pub const ALL: [FeatureMode; 3] = [
        FeatureMode::AverageOnly,
        FeatureMode::EntropyOnly,
        FeatureMode::AvgSd,
    ];

    pub fn dimension(self) -> usize {
        match self {
            FeatureMode::AverageOnly | FeatureMode::EntropyOnly => 1,
            FeatureMode::AvgSd => 2,
        }
    }

    /// Whether training appends one all-ones instance per window.
    pub fn uses_artificial_spikes(self) -> bool {
        !matches!(self, FeatureMode::EntropyOnly)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureMode::AverageOnly => "average_only",
            FeatureMode::EntropyOnly => "entropy_only",
            FeatureMode::AvgSd => "avg_sd",
        }
    }

    /// Raw (unnormalised) features of one window. `raw_min`/`raw_max` bound the
    /// raw training data and are only used by the entropy mode.
    pub fn raw_features(self, bin: &WindowBin, raw_min: f64, raw_max: f64) -> Result<Vec<f64>> {
        match self {
            FeatureMode::AverageOnly => Ok(vec![bin.stats()?.avg]),
            FeatureMode::EntropyOnly => Ok(vec![timeseries::entropy(bin, raw_min, raw_max)?]),
            FeatureMode::AvgSd => {
                let s = bin.stats()?;
                Ok(vec![s.avg, s.sd])
            }
        }
    }
}

impl fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" | "average" | "average_only" => Ok(FeatureMode::AverageOnly),
            "entropy" | "entropy_only" => Ok(FeatureMode::EntropyOnly),
            "avg-sd" | "avg_sd" => Ok(FeatureMode::AvgSd),
            other => Err(Error::InvalidInput(format!(
                "unknown feature mode '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceLabel {
    Positive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureInstance {
    pub features: Vec<f64>,
    pub label: InstanceLabel,
    /// Set for the all-ones spike stand-ins added during training.
    #[serde(default)]
    pub artificial: bool,
}

impl FeatureInstance {
    fn positive(features: Vec<f64>, artificial: bool) -> Self {
        Self {
            features,
            label: InstanceLabel::Positive,
            artificial,
        }
    }
}

/// Normalisation state captured at training time and reused for every test
/// instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBounds {
    pub mode: FeatureMode,
    pub per_feature_min: Vec<f64>,
    pub per_feature_max: Vec<f64>,
    /// Bounds of the raw training samples (entropy sub-binning).
    pub raw_min: f64,
    pub raw_max: f64,
}

impl FeatureBounds {
    pub fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.per_feature_min.iter().zip(&self.per_feature_max))
            .map(|(&x, (&lo, &hi))| normalize_or_zero(x, lo, hi))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMatrix {
    pub instances: Vec<FeatureInstance>,
    pub bounds: FeatureBounds,
    pub artificial_count: usize,
}

impl TrainingMatrix {
    pub fn mode(&self) -> FeatureMode {
        self.bounds.mode
    }

    pub fn real_instances(&self) -> impl Iterator<Item = &FeatureInstance> {
        self.instances.iter().filter(|i| !i.artificial)
    }

    pub fn feature_vectors(&self) -> Vec<Vec<f64>> {
        self.instances.iter().map(|i| i.features.clone()).collect()
    }
}

/// Builds the normalised training set from the complete windows of `series`.
pub fn build_training_set(
    series: &RawSeries,
    mode: FeatureMode,
    window_len: i64,
) -> Result<TrainingMatrix> {
    let bins = timeseries::partition_windows(series, window_len)?;
    build_training_set_from_bins(&bins, mode)
}

pub fn build_training_set_from_bins(
    bins: &[WindowBin],
    mode: FeatureMode,
) -> Result<TrainingMatrix> {
    if bins.len() < 2 {
        return Err(Error::InsufficientData {
            what: "training windows",
            needed: 2,
            got: bins.len(),
        });
    }
    let (raw_min, raw_max) = bins
        .iter()
        .flat_map(|b| b.values.iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });

    let raw: Vec<Vec<f64>> = bins
        .iter()
        .map(|b| mode.raw_features(b, raw_min, raw_max))
        .collect::<Result<_>>()?;

    let dim = mode.dimension();
    let mut per_feature_min = vec![f64::INFINITY; dim];
    let mut per_feature_max = vec![f64::NEG_INFINITY; dim];
    for row in &raw {
        for (d, &x) in row.iter().enumerate() {
            per_feature_min[d] = per_feature_min[d].min(x);
            per_feature_max[d] = per_feature_max[d].max(x);
        }
    }
    let bounds = FeatureBounds {
        mode,
        per_feature_min,
        per_feature_max,
        raw_min,
        raw_max,
    };

    let mut instances: Vec<FeatureInstance> = raw
        .iter()
        .map(|row| FeatureInstance::positive(bounds.normalize(row), false))
        .collect();

    let artificial_count = if mode.uses_artificial_spikes() {
        bins.len()
    } else {
        0
    };
    instances
        .extend((0..artificial_count).map(|_| FeatureInstance::positive(vec![1.0; dim], true)));

    Ok(TrainingMatrix {
        instances,
        bounds,
        artificial_count,
    })
}

/// Normalises the most recent window against the training bounds.
///
/// In `avg_sd` mode a window whose normalised average and standard deviation
/// both exceed 1.0 is replaced by the spike representative `(1.0, 1.0)`;
/// every other value passes through unclamped.
pub fn build_test_instance(window: &WindowBin, bounds: &FeatureBounds) -> Result<FeatureInstance> {
    if window.values.is_empty() {
        return Err(Error::EmptyInput("test window has no samples"));
    }
    let raw = bounds
        .mode
        .raw_features(window, bounds.raw_min, bounds.raw_max)?;
    Ok(FeatureInstance::positive(
        clamp_spike(bounds.mode, bounds.normalize(&raw)),
        false,
    ))
}

/// Spike clamp applied to an already normalised test vector.
pub fn clamp_spike(mode: FeatureMode, normalized: Vec<f64>) -> Vec<f64> {
    match mode {
        FeatureMode::AvgSd if normalized[0] > 1.0 && normalized[1] > 1.0 => vec![1.0, 1.0],
        _ => normalized,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::series::Metric;

    fn bins_from(stats: &[(f64, f64)]) -> Vec<WindowBin> {
        // two-sample windows with a chosen mean and sample sd: mean +- sd/sqrt(2)
        stats
            .iter()
            .enumerate()
            .map(|(i, &(avg, sd))| {
                let half = sd / std::f64::consts::SQRT_2;
                WindowBin::new(
                    i as i64 * 60,
                    (i as i64 + 1) * 60,
                    vec![avg - half, avg + half],
                )
            })
            .collect()
    }

    #[test]
    fn ten_windows_give_twenty_instances() {
        let values: Vec<f64> = (0..120).map(|i| 20.0 + (i % 7) as f64).collect();
        let s = RawSeries::from_values("vm", Metric::CpuPercent, 0, 5, &values).unwrap();
        let m = build_training_set(&s, FeatureMode::AvgSd, 60).unwrap();
        assert_eq!(m.instances.len(), 20);
        assert_eq!(m.artificial_count, 10);
        let ones = m
            .instances
            .iter()
            .filter(|i| i.artificial && i.features == vec![1.0, 1.0])
            .count();
        assert_eq!(ones, 10);
    }

    #[test]
    fn constant_series_uses_degenerate_rule() {
        let s = RawSeries::from_values("vm", Metric::CpuPercent, 0, 5, &[42.0; 120]).unwrap();
        let m = build_training_set(&s, FeatureMode::AvgSd, 60).unwrap();
        assert!(m.real_instances().all(|i| i.features == vec![0.0, 0.0]));
        assert_eq!(m.artificial_count, 10);
    }

    #[test]
    fn two_window_hand_normalisation() {
        let bins = bins_from(&[(10.0, 1.0), (20.0, 3.0)]);
        let m = build_training_set_from_bins(&bins, FeatureMode::AvgSd).unwrap();
        let real: Vec<_> = m.real_instances().map(|i| i.features.clone()).collect();
        assert_eq!(real.len(), 2);
        for (got, want) in real.iter().zip([[0.0, 0.0], [1.0, 1.0]]) {
            assert!((got[0] - want[0]).abs() < 1e-12 && (got[1] - want[1]).abs() < 1e-12);
        }
        assert_eq!(m.artificial_count, 2);
        assert!((m.bounds.per_feature_min[0] - 10.0).abs() < 1e-12);
        assert!((m.bounds.per_feature_max[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn entropy_mode_has_no_artificial_instances() {
        let values: Vec<f64> = (0..120).map(|i| (i % 13) as f64).collect();
        let s = RawSeries::from_values("vm", Metric::CpuPercent, 0, 5, &values).unwrap();
        let m = build_training_set(&s, FeatureMode::EntropyOnly, 60).unwrap();
        assert_eq!(m.artificial_count, 0);
        assert_eq!(m.instances.len(), 10);
        assert_eq!(m.bounds.raw_min, 0.0);
        assert_eq!(m.bounds.raw_max, 12.0);
    }

    #[test]
    fn single_window_is_insufficient() {
        let s = RawSeries::from_values("vm", Metric::CpuPercent, 0, 5, &[1.0; 12]).unwrap();
        assert!(matches!(
            build_training_set(&s, FeatureMode::AvgSd, 60),
            Err(Error::InsufficientData { .. })
        ));
    }

    fn unit_bounds(mode: FeatureMode) -> FeatureBounds {
        let dim = mode.dimension();
        FeatureBounds {
            mode,
            per_feature_min: vec![0.0; dim],
            per_feature_max: vec![10.0; dim],
            raw_min: 0.0,
            raw_max: 100.0,
        }
    }

    #[test]
    fn clamp_rule() {
        let b = unit_bounds(FeatureMode::AvgSd);
        assert_eq!(clamp_spike(b.mode, vec![1.2, 1.3]), vec![1.0, 1.0]);
        assert_eq!(clamp_spike(b.mode, vec![1.2, 0.4]), vec![1.2, 0.4]);
        assert_eq!(clamp_spike(b.mode, vec![0.5, 0.5]), vec![0.5, 0.5]);
        assert_eq!(clamp_spike(b.mode, vec![0.4, 1.2]), vec![0.4, 1.2]);
        assert_eq!(clamp_spike(FeatureMode::AverageOnly, vec![3.0]), vec![3.0]);
    }

    #[test]
    fn test_instance_normalises_against_training_bounds() {
        let b = unit_bounds(FeatureMode::AvgSd);
        // avg 12 -> 1.2, sd of [12 - h, 12 + h] chosen = 4 -> 0.4
        let half = 4.0 / std::f64::consts::SQRT_2;
        let w = WindowBin::new(0, 60, vec![12.0 - half, 12.0 + half]);
        let inst = build_test_instance(&w, &b).unwrap();
        assert!((inst.features[0] - 1.2).abs() < 1e-12);
        assert!((inst.features[1] - 0.4).abs() < 1e-12);

        let half = 13.0 / std::f64::consts::SQRT_2;
        let w = WindowBin::new(0, 60, vec![12.0 - half, 12.0 + half]);
        assert_eq!(
            build_test_instance(&w, &b).unwrap().features,
            vec![1.0, 1.0]
        );

        assert!(build_test_instance(&WindowBin::new(0, 60, vec![]), &b).is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!(
            "avg".parse::<FeatureMode>().unwrap(),
            FeatureMode::AverageOnly
        );
        assert_eq!(
            "entropy".parse::<FeatureMode>().unwrap(),
            FeatureMode::EntropyOnly
        );
        assert_eq!("avg-sd".parse::<FeatureMode>().unwrap(), FeatureMode::AvgSd);
        assert!("median".parse::<FeatureMode>().is_err());
    }
}
