//! Raw per-VM metric series.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lab cadence of the metric collector, in seconds.
pub const LAB_SAMPLE_INTERVAL: i64 = 5;
/// Cadence of five-minute public traces, in seconds.
pub const TRACE_SAMPLE_INTERVAL: i64 = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    CpuPercent,
    NetKbps,
}

impl Metric {
    pub const ALL: [Metric; 2] = [Metric::CpuPercent, Metric::NetKbps];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::CpuPercent => "cpu_percent",
            Metric::NetKbps => "net_kbps",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cpu_percent" | "cpu" => Ok(Metric::CpuPercent),
            "net_kbps" | "net" => Ok(Metric::NetKbps),
            other => Err(Error::InvalidInput(format!("unknown metric '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Seconds since the epoch.
    pub timestamp: i64,
    pub value: f64,
}

impl Sample {
    pub fn new(timestamp: i64, value: f64) -> Self {
        Self { timestamp, value }
    }
}

/// Ordered samples of one metric for one VM.
///
/// Timestamps are strictly increasing and values are finite and non-negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSeries {
    vm_id: String,
    metric: Metric,
    sample_interval: i64,
    samples: Vec<Sample>,
}

impl RawSeries {
    pub fn new(
        vm_id: impl Into<String>,
        metric: Metric,
        sample_interval: i64,
        samples: Vec<Sample>,
    ) -> Result<Self> {
        if sample_interval <= 0 {
            return Err(Error::InvalidInput(format!(
                "sample interval must be positive, got {sample_interval}"
            )));
        }
        for (i, s) in samples.iter().enumerate() {
            if !s.value.is_finite() || s.value < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "sample {i} at t={} has invalid value {}",
                    s.timestamp, s.value
                )));
            }
            if i > 0 && s.timestamp <= samples[i - 1].timestamp {
                return Err(Error::InvalidInput(format!(
                    "timestamps must be strictly increasing (sample {i} at t={})",
                    s.timestamp
                )));
            }
        }
        Ok(Self {
            vm_id: vm_id.into(),
            metric,
            sample_interval,
            samples,
        })
    }

    /// Series of `values` spaced `sample_interval` apart starting at `start`.
    pub fn from_values(
        vm_id: impl Into<String>,
        metric: Metric,
        start: i64,
        sample_interval: i64,
        values: &[f64],
    ) -> Result<Self> {
        let samples = values
            .iter()
            .enumerate()
            .map(|(i, &v)| Sample::new(start + i as i64 * sample_interval, v))
            .collect();
        Self::new(vm_id, metric, sample_interval, samples)
    }

    pub fn vm_id(&self) -> &str {
        &self.vm_id
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn sample_interval(&self) -> i64 {
        self.sample_interval
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|s| s.value)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn first_timestamp(&self) -> Option<i64> {
        self.samples.first().map(|s| s.timestamp)
    }

    pub fn last_timestamp(&self) -> Option<i64> {
        self.samples.last().map(|s| s.timestamp)
    }

    /// Appends a sample, enforcing the series invariants.
    pub fn push(&mut self, sample: Sample) -> Result<()> {
        if !sample.value.is_finite() || sample.value < 0.0 {
            return Err(Error::InvalidInput(format!(
                "invalid value {} at t={}",
                sample.value, sample.timestamp
            )));
        }
        if let Some(last) = self.samples.last() {
            if sample.timestamp <= last.timestamp {
                return Err(Error::InvalidInput(format!(
                    "timestamp {} not after {}",
                    sample.timestamp, last.timestamp
                )));
            }
        }
        self.samples.push(sample);
        Ok(())
    }

    /// Samples with `from <= timestamp < to`, as a new series.
    pub fn slice_time(&self, from: i64, to: i64) -> RawSeries {
        let samples = self
            .samples
            .iter()
            .filter(|s| s.timestamp >= from && s.timestamp < to)
            .copied()
            .collect();
        RawSeries {
            vm_id: self.vm_id.clone(),
            metric: self.metric,
            sample_interval: self.sample_interval,
            samples,
        }
    }
}
