//! Synthetic VM workloads: base load with optional periodic structure,
//! one-sample genuine spikes and sustained attack segments, with per-window
//! ground truth.
//!
//! Attacks hold the metric near saturation with little jitter, so attack
//! windows have a high average and a low standard deviation. Spikes are
//! short additive bursts, so spike windows have both a high average and a
//! high standard deviation.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{emit_canonical_csv, MetricRecord};
use crate::series::{Metric, RawSeries, Sample, LAB_SAMPLE_INTERVAL};
use crate::timeseries::DEFAULT_WINDOW_LEN;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Periodic {
    /// `amplitude * sin(2π (t + phase) / period)`.
    Sine {
        period: i64,
        amplitude: f64,
        phase: i64,
    },
    /// Adds `amplitude` while `(t + phase) mod period < width`. A negative
    /// amplitude gives periodic dips.
    Pulse {
        period: i64,
        width: i64,
        amplitude: f64,
        phase: i64,
    },
}

impl Periodic {
    fn value(&self, t: i64) -> f64 {
        match *self {
            Periodic::Sine {
                period,
                amplitude,
                phase,
            } => amplitude * (std::f64::consts::TAU * (t + phase) as f64 / period as f64).sin(),
            Periodic::Pulse {
                period,
                width,
                amplitude,
                phase,
            } => {
                if (t + phase).rem_euclid(period) < width {
                    amplitude
                } else {
                    0.0
                }
            }
        }
    }

    /// Largest upward excursion.
    fn max_up(&self) -> f64 {
        match *self {
            Periodic::Sine { amplitude, .. } => amplitude.abs(),
            Periodic::Pulse { amplitude, .. } => amplitude.max(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseLoad {
    pub mean: f64,
    /// Half-width of the uniform noise.
    pub noise: f64,
    pub periodic: Option<Periodic>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spike {
    /// Seconds from scenario start.
    pub at: i64,
    pub duration: i64,
    /// Added to the base load.
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attack {
    /// Seconds from scenario start, `[start, end)`.
    pub start: i64,
    pub end: i64,
    pub level: f64,
    /// Half-width of the uniform jitter around `level`.
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub vm_id: String,
    pub metric: Metric,
    pub start_timestamp: i64,
    /// Seconds.
    pub duration: i64,
    pub sample_interval: i64,
    /// Leading unscored normal segment used for training, in seconds.
    pub prelude: i64,
    pub window_len: i64,
    pub base: BaseLoad,
    pub spikes: Vec<Spike>,
    pub attacks: Vec<Attack>,
    /// Upper bound on generated values (100 for CPU percent).
    pub cap: Option<f64>,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.sample_interval <= 0
            || self.window_len <= 0
            || self.window_len % self.sample_interval != 0
        {
            return bad("window length must be a positive multiple of the sample interval".into());
        }
        if self.duration <= 0 || self.duration % self.sample_interval != 0 {
            return bad(format!(
                "duration {} must be a positive multiple of the sample interval",
                self.duration
            ));
        }
        if self.prelude < 0 || self.prelude % self.window_len != 0 || self.prelude >= self.duration
        {
            return bad(format!(
                "prelude {} must be a whole number of windows shorter than the duration",
                self.prelude
            ));
        }
        if self.base.mean < 0.0 || self.base.noise < 0.0 {
            return bad("base mean and noise must be non-negative".into());
        }
        match self.base.periodic {
            Some(Periodic::Sine { period, .. }) | Some(Periodic::Pulse { period, .. })
                if period <= 0 =>
            {
                return bad("periodic component needs a positive period".into())
            }
            _ => {}
        }
        for s in &self.spikes {
            if s.at < 0 || s.at + s.duration > self.duration || s.duration <= 0 {
                return bad(format!("spike at {} lies outside the scenario", s.at));
            }
            if s.duration > 2 * self.sample_interval {
                return bad(format!(
                    "spike at {} lasts {} s, more than two samples",
                    s.at, s.duration
                ));
            }
        }
        let normal_max = self.base.mean
            + self.base.noise
            + self.base.periodic.as_ref().map_or(0.0, Periodic::max_up);
        for a in &self.attacks {
            if a.start < 0 || a.end > self.duration || a.start >= a.end {
                return bad(format!(
                    "attack [{}, {}) lies outside the scenario",
                    a.start, a.end
                ));
            }
            if a.level <= normal_max {
                return bad(format!(
                    "attack level {} does not exceed the normal maximum {normal_max}",
                    a.level
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowLabel {
    Normal,
    Anomaly,
}

impl fmt::Display for WindowLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WindowLabel::Normal => "normal",
            WindowLabel::Anomaly => "anomaly",
        })
    }
}

impl FromStr for WindowLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "normal" | "0" => Ok(WindowLabel::Normal),
            "anomaly" | "1" => Ok(WindowLabel::Anomaly),
            other => Err(Error::InvalidInput(format!("unknown label '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowTruth {
    pub window_start: i64,
    pub window_end: i64,
    pub label: WindowLabel,
}

/// Generated series with labels for every scored (post-prelude) window.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSeries {
    pub series: RawSeries,
    pub truth: Vec<WindowTruth>,
    /// First scored timestamp.
    pub scored_from: i64,
}

impl LabeledSeries {
    pub fn training_series(&self) -> RawSeries {
        let start = self.series.first_timestamp().unwrap_or(self.scored_from);
        self.series.slice_time(start, self.scored_from)
    }

    pub fn scored_series(&self) -> RawSeries {
        self.series.slice_time(self.scored_from, i64::MAX)
    }

    pub fn anomaly_windows(&self) -> usize {
        self.truth
            .iter()
            .filter(|w| w.label == WindowLabel::Anomaly)
            .count()
    }

    /// Canonical CSV; the metric not simulated is written as 0.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let records: Vec<MetricRecord> = self
            .series
            .samples()
            .iter()
            .map(|s| {
                let (cpu, net) = match self.series.metric() {
                    Metric::CpuPercent => (s.value, 0.0),
                    Metric::NetKbps => (0.0, s.value),
                };
                MetricRecord {
                    vm_id: self.series.vm_id().to_string(),
                    timestamp: s.timestamp,
                    cpu_percent: cpu,
                    net_kbps: net,
                }
            })
            .collect();
        emit_canonical_csv(&records, out)
    }

    /// `window_end,label` lines, one per scored window, after a header.
    pub fn write_truth<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "window_end,label")?;
        for w in &self.truth {
            writeln!(out, "{},{}", w.window_end, w.label)?;
        }
        Ok(())
    }
}

/// Deterministic for a given spec (including its seed).
pub fn generate(spec: &ScenarioSpec) -> Result<LabeledSeries> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.duration / spec.sample_interval;
    let mut samples = Vec::with_capacity(n as usize);
    for i in 0..n {
        let t = i * spec.sample_interval;
        // two draws per sample regardless of events, so a shared prefix of
        // two specs with the same seed generates identical values
        let noise: f64 = rng.random_range(-1.0..=1.0);
        let jitter: f64 = rng.random_range(-1.0..=1.0);

        let value = match spec.attacks.iter().find(|a| t >= a.start && t < a.end) {
            Some(a) => a.level + a.jitter * jitter,
            None => {
                let mut v = spec.base.mean
                    + spec.base.noise * noise
                    + spec.base.periodic.as_ref().map_or(0.0, |p| p.value(t));
                v += spec
                    .spikes
                    .iter()
                    .filter(|s| t >= s.at && t < s.at + s.duration)
                    .map(|s| s.magnitude)
                    .sum::<f64>();
                v
            }
        };
        let value = spec.cap.map_or(value, |c| value.min(c)).max(0.0);
        samples.push(Sample::new(spec.start_timestamp + t, value));
    }
    let series = RawSeries::new(
        spec.vm_id.clone(),
        spec.metric,
        spec.sample_interval,
        samples,
    )?;

    let mut truth = Vec::new();
    let mut ws = spec.prelude;
    while ws + spec.window_len <= spec.duration {
        let we = ws + spec.window_len;
        let hit = spec.attacks.iter().any(|a| {
            // some sample t in [ws, we) with a.start <= t < a.end
            let lo = ws.max(a.start);
            let hi = we.min(a.end);
            let first = lo
                + (spec.sample_interval - lo.rem_euclid(spec.sample_interval))
                    % spec.sample_interval;
            first < hi
        });
        truth.push(WindowTruth {
            window_start: spec.start_timestamp + ws,
            window_end: spec.start_timestamp + we,
            label: if hit {
                WindowLabel::Anomaly
            } else {
                WindowLabel::Normal
            },
        });
        ws = we;
    }
    Ok(LabeledSeries {
        series,
        truth,
        scored_from: spec.start_timestamp + spec.prelude,
    })
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Graph-analytics style CPU load with brief periodic dips; cryptomining
    /// attack.
    Cpu,
    /// Media-streaming style network throughput; DDoS attack.
    Net,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cpu" => Ok(Profile::Cpu),
            "net" => Ok(Profile::Net),
            other => Err(Error::InvalidInput(format!("unknown profile '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Normal prelude, then a 10-minute attack starting mid-window.
    AttackTest,
    /// Same normal prelude, then 30 minutes with 10 random one-sample spikes.
    SpikeTest,
    /// 50 minutes, spike in minute 12, attack in minute 49.
    Figure5Timeline,
    MediaStreamingNormal,
    GraphAnalyticsNormal,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::AttackTest,
        Preset::SpikeTest,
        Preset::Figure5Timeline,
        Preset::MediaStreamingNormal,
        Preset::GraphAnalyticsNormal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::AttackTest => "attack_test",
            Preset::SpikeTest => "spike_test",
            Preset::Figure5Timeline => "figure5_timeline",
            Preset::MediaStreamingNormal => "media_streaming_normal",
            Preset::GraphAnalyticsNormal => "graph_analytics_normal",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::UnknownPreset(s.to_string()))
    }
}

/// Length of the normal training segment shared by the attack and spike tests.
pub const PRELUDE_SECONDS: i64 = 120 * 60;
const ATTACK_TEST_SCORED: i64 = 10 * 60;
const SPIKE_TEST_SCORED: i64 = 30 * 60;
const SPIKE_COUNT: usize = 10;
const ATTACK_ONSET_OFFSET: i64 = 30;

struct ProfileParams {
    vm_id: &'static str,
    metric: Metric,
    base: BaseLoad,
    spike: f64,
    attack_level: f64,
    attack_jitter: f64,
    cap: Option<f64>,
}

fn profile_params(profile: Profile) -> ProfileParams {
    match profile {
        Profile::Cpu => ProfileParams {
            vm_id: "graph-analytics",
            metric: Metric::CpuPercent,
            base: BaseLoad {
                mean: 25.0,
                noise: 0.8,
                periodic: Some(Periodic::Pulse {
                    period: 170,
                    width: 10,
                    amplitude: -20.0,
                    phase: 0,
                }),
            },
            spike: 75.0,
            attack_level: 98.0,
            attack_jitter: 0.5,
            cap: Some(100.0),
        },
        Profile::Net => ProfileParams {
            vm_id: "media-streaming",
            metric: Metric::NetKbps,
            base: BaseLoad {
                mean: 5000.0,
                noise: 300.0,
                periodic: None,
            },
            spike: 50_000.0,
            attack_level: 60_000.0,
            attack_jitter: 200.0,
            cap: None,
        },
    }
}

fn base_spec(p: &ProfileParams, duration: i64, prelude: i64, seed: u64) -> ScenarioSpec {
    ScenarioSpec {
        vm_id: p.vm_id.to_string(),
        metric: p.metric,
        start_timestamp: 0,
        duration,
        sample_interval: LAB_SAMPLE_INTERVAL,
        prelude,
        window_len: DEFAULT_WINDOW_LEN,
        base: p.base.clone(),
        spikes: Vec::new(),
        attacks: Vec::new(),
        cap: p.cap,
        seed,
    }
}

/// Builds a preset scenario. `profile` selects CPU or network flavour for the
/// attack, spike and timeline presets; the two normal-only presets have a
/// fixed profile and ignore it.
pub fn preset(name: Preset, profile: Profile, seed: u64) -> ScenarioSpec {
    match name {
        Preset::AttackTest => {
            let p = profile_params(profile);
            let mut spec = base_spec(
                &p,
                PRELUDE_SECONDS + ATTACK_TEST_SCORED,
                PRELUDE_SECONDS,
                seed,
            );
            spec.attacks.push(Attack {
                start: PRELUDE_SECONDS + ATTACK_ONSET_OFFSET,
                end: spec.duration,
                level: p.attack_level,
                jitter: p.attack_jitter,
            });
            spec
        }
        Preset::SpikeTest => {
            let p = profile_params(profile);
            let mut spec = base_spec(
                &p,
                PRELUDE_SECONDS + SPIKE_TEST_SCORED,
                PRELUDE_SECONDS,
                seed,
            );
            // separate stream so spike placement does not disturb the noise
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5B1C_E000_0001);
            let windows = (SPIKE_TEST_SCORED / spec.window_len) as usize;
            let per_window = spec.window_len / spec.sample_interval;
            let mut chosen = sample_indices(&mut rng, windows, SPIKE_COUNT).into_vec();
            chosen.sort_unstable();
            for w in chosen {
                let slot = rng.random_range(0..per_window);
                spec.spikes.push(Spike {
                    at: PRELUDE_SECONDS + w as i64 * spec.window_len + slot * spec.sample_interval,
                    duration: spec.sample_interval,
                    magnitude: p.spike,
                });
            }
            spec
        }
        Preset::Figure5Timeline => figure5(profile, seed),
        Preset::MediaStreamingNormal => base_spec(&profile_params(Profile::Net), 60 * 60, 0, seed),
        Preset::GraphAnalyticsNormal => base_spec(&profile_params(Profile::Cpu), 60 * 60, 0, seed),
    }
}

/// Sinusoidal load with a five-minute period whose trough falls in minute 12.
/// A spike there lifts the window's deviation far above anything seen in the
/// first five minutes while its average stays in range; the attack fills
/// minute 49 exactly.
fn figure5(profile: Profile, seed: u64) -> ScenarioSpec {
    let (vm_id, metric, scale, cap) = match profile {
        Profile::Cpu => ("timeline", Metric::CpuPercent, 1.0, Some(100.0)),
        Profile::Net => ("timeline-net", Metric::NetKbps, 200.0, None),
    };
    let mut spec = ScenarioSpec {
        vm_id: vm_id.into(),
        metric,
        start_timestamp: 0,
        duration: 50 * 60,
        sample_interval: LAB_SAMPLE_INTERVAL,
        prelude: 0,
        window_len: DEFAULT_WINDOW_LEN,
        base: BaseLoad {
            mean: 30.0 * scale,
            noise: 1.0 * scale,
            periodic: Some(Periodic::Sine {
                period: 300,
                amplitude: 8.0 * scale,
                // sin(2π (690 + 135) / 300) = -1: trough at the middle of minute 12
                phase: 135,
            }),
        },
        spikes: vec![Spike {
            at: 690,
            duration: LAB_SAMPLE_INTERVAL,
            magnitude: 40.0 * scale,
        }],
        attacks: vec![Attack {
            start: 48 * 60,
            end: 49 * 60,
            level: 95.0 * scale,
            jitter: 0.5 * scale,
        }],
        cap,
        seed,
    };
    if profile == Profile::Net {
        spec.attacks[0].jitter = 50.0;
    }
    spec
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attack_labels_follow_overlap() {
        let mut spec = preset(Preset::GraphAnalyticsNormal, Profile::Cpu, 1);
        spec.duration = 30 * 60;
        spec.attacks.push(Attack {
            start: 600,
            end: 1200,
            level: 97.0,
            jitter: 0.5,
        });
        let ls = generate(&spec).unwrap();
        let anomalous: Vec<usize> = ls
            .truth
            .iter()
            .enumerate()
            .filter(|(_, w)| w.label == WindowLabel::Anomaly)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(anomalous, (10..20).collect::<Vec<_>>());
    }

    #[test]
    fn attack_bounds_between_samples() {
        let mut spec = preset(Preset::GraphAnalyticsNormal, Profile::Cpu, 1);
        spec.duration = 10 * 60;
        // samples 65..=115 only
        spec.attacks.push(Attack {
            start: 61,
            end: 119,
            level: 97.0,
            jitter: 0.0,
        });
        let ls = generate(&spec).unwrap();
        let labels: Vec<_> = ls.truth.iter().take(3).map(|w| w.label).collect();
        assert_eq!(
            labels,
            [
                WindowLabel::Normal,
                WindowLabel::Anomaly,
                WindowLabel::Normal
            ]
        );
    }

    #[test]
    fn validation_rejects_bad_events() {
        let mut spec = preset(Preset::GraphAnalyticsNormal, Profile::Cpu, 1);
        spec.spikes.push(Spike {
            at: 100,
            duration: 15,
            magnitude: 50.0,
        });
        assert!(generate(&spec).is_err());

        let mut spec = preset(Preset::GraphAnalyticsNormal, Profile::Cpu, 1);
        spec.attacks.push(Attack {
            start: 0,
            end: 60,
            level: 25.5,
            jitter: 0.0,
        });
        assert!(generate(&spec).is_err());

        let mut spec = preset(Preset::GraphAnalyticsNormal, Profile::Cpu, 1);
        spec.attacks.push(Attack {
            start: 3500,
            end: 3700,
            level: 99.0,
            jitter: 0.0,
        });
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn preset_names() {
        assert_eq!("spike_test".parse::<Preset>().unwrap(), Preset::SpikeTest);
        assert!(matches!(
            "nope".parse::<Preset>(),
            Err(Error::UnknownPreset(_))
        ));
    }

    #[test]
    fn values_respect_cap_and_floor() {
        let ls = generate(&preset(Preset::AttackTest, Profile::Cpu, 4)).unwrap();
        assert!(ls.series.values().all(|v| (0.0..=100.0).contains(&v)));
    }
}
