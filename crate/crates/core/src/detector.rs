//! Online runtime: one pipeline per (vm, metric) that classifies every closed
//! window and runs the training optimiser every fifth window.
//!
//! Stream time starts at the first sample. After the window ending at
//! boundary `b` (counted in windows since the origin) closes:
//!
//! 1. if `b > idle_windows`, the window is complete and a model exists, the
//!    window is classified;
//! 2. if `b` is a multiple of the optimiser period and the VM has not
//!    completed training, a training tick runs.
//!
//! Alerts fire only for anomalies seen after training has completed.

use std::fmt;
use std::io::Write;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::occ::{occ_classify, train_occ, Classification, OccConfig, OccModel};
use crate::series::{Metric, RawSeries, Sample};
use crate::timeseries::{samples_per_window, WindowBin, DEFAULT_WINDOW_LEN};
use crate::wtsa::{build_test_instance, build_training_set_from_bins, FeatureMode};

pub const DEFAULT_SPT_MINUTES: u32 = 30;
/// Windows skipped at stream start while data accumulates.
pub const DEFAULT_IDLE_WINDOWS: u32 = 5;
/// Windows between optimiser ticks.
pub const OPTIMISER_PERIOD_WINDOWS: u32 = 5;
/// A jump of more than this many windows between samples logs a gap warning.
pub const GAP_WARNING_WINDOWS: i64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingStatus {
    FirstRun,
    Running,
    Stopped,
    Completed,
}

impl fmt::Display for TrainingStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainingStatus::FirstRun => "first_run",
            TrainingStatus::Running => "running",
            TrainingStatus::Stopped => "stopped",
            TrainingStatus::Completed => "completed",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Normal,
    Anomaly,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Normal => "normal",
            Verdict::Anomaly => "anomaly",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub vm_id: String,
    pub metric: Metric,
    pub window_end: i64,
    pub verdict: Verdict,
    /// Unnormalised features of the classified window.
    pub raw_features: Vec<f64>,
    pub alert_emitted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmTrainingState {
    pub vm_id: String,
    pub metric: Metric,
    pub status: TrainingStatus,
    /// Minutes of stream time without a retrain; `0..=spt`.
    pub stability_period: u32,
    /// Results since the last optimiser tick.
    pub adr_buffer: Vec<DetectionResult>,
    pub model_version: u64,
    pub spt: u32,
}

impl VmTrainingState {
    pub fn new(vm_id: impl Into<String>, metric: Metric, spt: u32) -> Self {
        Self {
            vm_id: vm_id.into(),
            metric,
            status: TrainingStatus::FirstRun,
            stability_period: 0,
            adr_buffer: Vec::new(),
            model_version: 0,
            spt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Seconds.
    pub window_len: i64,
    pub spt_minutes: u32,
    pub mode: FeatureMode,
    pub occ: OccConfig,
    pub seed: u64,
    pub idle_windows: u32,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            window_len: DEFAULT_WINDOW_LEN,
            spt_minutes: DEFAULT_SPT_MINUTES,
            mode: FeatureMode::AvgSd,
            occ: OccConfig::default(),
            seed: 0,
            idle_windows: DEFAULT_IDLE_WINDOWS,
        }
    }
}

impl DetectorConfig {
    /// Stability gained by one clean optimiser tick, in minutes.
    pub fn stability_increment(&self) -> u32 {
        (OPTIMISER_PERIOD_WINDOWS as i64 * self.window_len / 60).max(1) as u32
    }

    /// Training seed for a given model version; independent of VM order.
    pub fn training_seed(&self, model_version: u64) -> u64 {
        self.seed.wrapping_add(model_version)
    }
}

/// Classifies one complete window against `model`.
///
/// While training is incomplete the result is appended to the ADR buffer;
/// afterwards an anomaly emits an alert instead.
pub fn detect(
    state: &mut VmTrainingState,
    model: Option<&OccModel>,
    window: &WindowBin,
) -> Result<DetectionResult> {
    let model = model.ok_or_else(|| Error::NotTrained {
        vm_id: state.vm_id.clone(),
        metric: state.metric,
    })?;
    let bounds = model
        .bounds
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("model carries no feature bounds".into()))?;
    let raw_features = bounds
        .mode
        .raw_features(window, bounds.raw_min, bounds.raw_max)?;
    let instance = build_test_instance(window, bounds)?;
    let verdict = match occ_classify(model, &instance.features)? {
        Classification::Positive => Verdict::Normal,
        Classification::Negative => Verdict::Anomaly,
    };
    let completed = state.status == TrainingStatus::Completed;
    let result = DetectionResult {
        vm_id: state.vm_id.clone(),
        metric: state.metric,
        window_end: window.end,
        verdict,
        raw_features,
        alert_emitted: completed && verdict == Verdict::Anomaly,
    };
    if !completed {
        state.adr_buffer.push(result.clone());
    }
    Ok(result)
}

#[derive(Debug)]
pub enum TickOutcome {
    Skipped,
    Retrained(Box<OccModel>),
    RetrainFailed(Error),
    Stopped,
    Completed,
}

/// One optimiser tick over the complete-window `history`.
pub fn training_tick(
    state: &mut VmTrainingState,
    history: &[WindowBin],
    config: &DetectorConfig,
) -> TickOutcome {
    if state.status == TrainingStatus::Completed {
        return TickOutcome::Skipped;
    }
    let must_train = state.status == TrainingStatus::FirstRun
        || state
            .adr_buffer
            .iter()
            .any(|r| r.verdict == Verdict::Anomaly);
    state.adr_buffer.clear();

    if must_train {
        let version = state.model_version + 1;
        let trained = build_training_set_from_bins(history, config.mode)
            .and_then(|m| train_occ(&m, &config.occ, config.training_seed(version)));
        return match trained {
            Ok(model) => {
                state.model_version = version;
                state.status = TrainingStatus::Running;
                state.stability_period = 0;
                TickOutcome::Retrained(Box::new(model))
            }
            Err(e) => {
                // without any model there is nothing to stabilise; retry next tick
                if state.status != TrainingStatus::FirstRun {
                    state.status = TrainingStatus::Stopped;
                }
                TickOutcome::RetrainFailed(e)
            }
        };
    }

    state.stability_period = (state.stability_period + config.stability_increment()).min(state.spt);
    if state.stability_period >= state.spt {
        state.status = TrainingStatus::Completed;
        TickOutcome::Completed
    } else {
        state.status = TrainingStatus::Stopped;
        TickOutcome::Stopped
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TickKind {
    Retrained { model_version: u64 },
    RetrainFailed { reason: String },
    Stopped { stability: u32 },
    Completed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickEvent {
    pub vm_id: String,
    pub metric: Metric,
    pub timestamp: i64,
    /// Windows elapsed since the stream origin.
    pub window: u32,
    pub kind: TickKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineEvent {
    Detection(DetectionResult),
    Tick(TickEvent),
}

impl PipelineEvent {
    pub fn timestamp(&self) -> i64 {
        match self {
            PipelineEvent::Detection(d) => d.window_end,
            PipelineEvent::Tick(t) => t.timestamp,
        }
    }
}

/// Streaming pipeline for one (vm, metric) pair. Owns its state exclusively.
#[derive(Debug)]
pub struct VmPipeline {
    config: DetectorConfig,
    state: VmTrainingState,
    model: Option<OccModel>,
    history: Vec<WindowBin>,
    per_window: usize,
    origin: Option<i64>,
    last_timestamp: Option<i64>,
    current_index: i64,
    current: Vec<f64>,
}

impl VmPipeline {
    pub fn new(
        vm_id: impl Into<String>,
        metric: Metric,
        sample_interval: i64,
        config: DetectorConfig,
    ) -> Result<Self> {
        let per_window = samples_per_window(config.window_len, sample_interval)?;
        config.occ.validate()?;
        Ok(Self {
            state: VmTrainingState::new(vm_id, metric, config.spt_minutes),
            config,
            model: None,
            history: Vec::new(),
            per_window,
            origin: None,
            last_timestamp: None,
            current_index: 0,
            current: Vec::new(),
        })
    }

    pub fn state(&self) -> &VmTrainingState {
        &self.state
    }

    pub fn model(&self) -> Option<&OccModel> {
        self.model.as_ref()
    }

    pub fn history(&self) -> &[WindowBin] {
        &self.history
    }

    pub fn into_parts(self) -> (VmTrainingState, Option<OccModel>) {
        (self.state, self.model)
    }

    pub fn push(&mut self, sample: Sample) -> Result<Vec<PipelineEvent>> {
        if let Some(prev) = self.last_timestamp {
            if sample.timestamp <= prev {
                return Err(Error::InvalidInput(format!(
                    "vm {} {}: timestamp {} not after {}",
                    self.state.vm_id, self.state.metric, sample.timestamp, prev
                )));
            }
        }
        if !sample.value.is_finite() || sample.value < 0.0 {
            return Err(Error::InvalidInput(format!(
                "vm {} {}: invalid value {} at t={}",
                self.state.vm_id, self.state.metric, sample.value, sample.timestamp
            )));
        }
        self.last_timestamp = Some(sample.timestamp);
        let origin = *self.origin.get_or_insert(sample.timestamp);
        let index = (sample.timestamp - origin).div_euclid(self.config.window_len);

        let mut events = Vec::new();
        if index - self.current_index > GAP_WARNING_WINDOWS {
            warn!(
                "vm {} {}: gap of {} windows before t={}",
                self.state.vm_id,
                self.state.metric,
                index - self.current_index,
                sample.timestamp
            );
        }
        while self.current_index < index {
            self.close_window(&mut events);
        }
        self.current.push(sample.value);
        Ok(events)
    }

    /// Closes the trailing window at end of stream.
    pub fn finish(&mut self) -> Vec<PipelineEvent> {
        let mut events = Vec::new();
        if self.origin.is_some() && !self.current.is_empty() {
            self.close_window(&mut events);
        }
        events
    }

    fn close_window(&mut self, events: &mut Vec<PipelineEvent>) {
        let origin = self.origin.expect("window closed before first sample");
        let start = origin + self.current_index * self.config.window_len;
        let end = start + self.config.window_len;
        let values = std::mem::take(&mut self.current);
        self.current_index += 1;
        let boundary = self.current_index as u32;

        let complete = values.len() >= self.per_window;
        let bin = WindowBin::new(start, end, values);

        if complete && boundary > self.config.idle_windows && self.model.is_some() {
            match detect(&mut self.state, self.model.as_ref(), &bin) {
                Ok(result) => events.push(PipelineEvent::Detection(result)),
                Err(e) => warn!(
                    "vm {} {}: detection failed: {e}",
                    self.state.vm_id, self.state.metric
                ),
            }
        }
        if complete {
            self.history.push(bin);
        }

        if boundary.is_multiple_of(OPTIMISER_PERIOD_WINDOWS) {
            let kind = match training_tick(&mut self.state, &self.history, &self.config) {
                TickOutcome::Skipped => None,
                TickOutcome::Retrained(model) => {
                    self.model = Some(*model);
                    Some(TickKind::Retrained {
                        model_version: self.state.model_version,
                    })
                }
                TickOutcome::RetrainFailed(e) => {
                    warn!(
                        "vm {} {}: retrain failed: {e}",
                        self.state.vm_id, self.state.metric
                    );
                    Some(TickKind::RetrainFailed {
                        reason: e.to_string(),
                    })
                }
                TickOutcome::Stopped => Some(TickKind::Stopped {
                    stability: self.state.stability_period,
                }),
                TickOutcome::Completed => Some(TickKind::Completed),
            };
            if let Some(kind) = kind {
                events.push(PipelineEvent::Tick(TickEvent {
                    vm_id: self.state.vm_id.clone(),
                    metric: self.state.metric,
                    timestamp: end,
                    window: boundary,
                    kind,
                }));
            }
        }
    }
}

/// Runs one pipeline per series over the whole stream and returns all events
/// ordered by timestamp (per-pipeline order is preserved on ties).
pub fn run_online(streams: &[RawSeries], config: &DetectorConfig) -> Result<Vec<PipelineEvent>> {
    let per_stream: Vec<Vec<PipelineEvent>> = streams
        .par_iter()
        .map(|series| run_single(series, config))
        .collect::<Result<_>>()?;
    let mut merged: Vec<PipelineEvent> = per_stream.into_iter().flatten().collect();
    merged.sort_by_key(PipelineEvent::timestamp);
    Ok(merged)
}

fn run_single(series: &RawSeries, config: &DetectorConfig) -> Result<Vec<PipelineEvent>> {
    let mut pipeline = VmPipeline::new(
        series.vm_id(),
        series.metric(),
        series.sample_interval(),
        config.clone(),
    )?;
    let mut events = Vec::new();
    for s in series.samples() {
        events.extend(pipeline.push(*s)?);
    }
    events.extend(pipeline.finish());
    Ok(events)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertRecord {
    pub timestamp: i64,
    pub vm_id: String,
    pub metric: Metric,
    pub verdict: Verdict,
}

/// Newline-delimited JSON sink for emitted alerts.
pub struct AlertSink<W: Write> {
    out: W,
    written: usize,
}

impl<W: Write> AlertSink<W> {
    pub fn new(out: W) -> Self {
        Self { out, written: 0 }
    }

    /// Writes `result` if it carries an alert; returns whether it did.
    pub fn offer(&mut self, result: &DetectionResult) -> Result<bool> {
        if !result.alert_emitted {
            return Ok(false);
        }
        let record = AlertRecord {
            timestamp: result.window_end,
            vm_id: result.vm_id.clone(),
            metric: result.metric,
            verdict: result.verdict,
        };
        serde_json::to_writer(&mut self.out, &record)?;
        self.out.write_all(b"\n")?;
        self.written += 1;
        Ok(true)
    }

    pub fn written(&self) -> usize {
        self.written
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> DetectorConfig {
        DetectorConfig::default()
    }

    fn window(end: i64, values: Vec<f64>) -> WindowBin {
        WindowBin::new(end - 60, end, values)
    }

    #[test]
    fn first_tick_trains() {
        let mut st = VmTrainingState::new("vm", Metric::CpuPercent, 30);
        let hist: Vec<_> = (1..=5)
            .map(|k| {
                window(
                    k * 60,
                    (0..12).map(|i| 20.0 + (i + k) as f64 % 3.0).collect(),
                )
            })
            .collect();
        let out = training_tick(&mut st, &hist, &config());
        assert!(matches!(out, TickOutcome::Retrained(_)));
        assert_eq!(st.status, TrainingStatus::Running);
        assert_eq!(st.model_version, 1);
        assert_eq!(st.stability_period, 0);
    }

    #[test]
    fn clean_ticks_accumulate_to_completion() {
        let mut st = VmTrainingState::new("vm", Metric::CpuPercent, 30);
        st.status = TrainingStatus::Running;
        let mut trace = Vec::new();
        for _ in 0..6 {
            let out = training_tick(&mut st, &[], &config());
            trace.push((
                st.status,
                st.stability_period,
                matches!(out, TickOutcome::Completed),
            ));
        }
        assert_eq!(trace[0], (TrainingStatus::Stopped, 5, false));
        assert_eq!(trace[4], (TrainingStatus::Stopped, 25, false));
        assert_eq!(trace[5], (TrainingStatus::Completed, 30, true));
        assert!(matches!(
            training_tick(&mut st, &[], &config()),
            TickOutcome::Skipped
        ));
        assert_eq!(st.status, TrainingStatus::Completed);
    }

    #[test]
    fn failed_retrain_keeps_status_stopped() {
        let mut st = VmTrainingState::new("vm", Metric::CpuPercent, 30);
        st.status = TrainingStatus::Stopped;
        st.stability_period = 10;
        st.adr_buffer.push(DetectionResult {
            vm_id: "vm".into(),
            metric: Metric::CpuPercent,
            window_end: 60,
            verdict: Verdict::Anomaly,
            raw_features: vec![],
            alert_emitted: false,
        });
        let out = training_tick(&mut st, &[], &config());
        assert!(matches!(out, TickOutcome::RetrainFailed(_)));
        assert_eq!(st.status, TrainingStatus::Stopped);
        assert!(st.adr_buffer.is_empty());
        assert_eq!(st.model_version, 0);
    }

    #[test]
    fn detect_without_model_is_not_trained() {
        let mut st = VmTrainingState::new("vm", Metric::NetKbps, 30);
        let err = detect(&mut st, None, &window(60, vec![1.0; 12])).unwrap_err();
        assert!(matches!(err, Error::NotTrained { .. }));
    }

    #[test]
    fn alert_sink_writes_only_alerts() {
        let mut sink = AlertSink::new(Vec::new());
        let mut r = DetectionResult {
            vm_id: "vm7".into(),
            metric: Metric::CpuPercent,
            window_end: 2940,
            verdict: Verdict::Anomaly,
            raw_features: vec![95.0, 0.3],
            alert_emitted: true,
        };
        assert!(sink.offer(&r).unwrap());
        r.alert_emitted = false;
        assert!(!sink.offer(&r).unwrap());
        let text = String::from_utf8(sink.into_inner()).unwrap();
        assert_eq!(
            text,
            "{\"timestamp\":2940,\"vm_id\":\"vm7\",\"metric\":\"cpu_percent\",\"verdict\":\"anomaly\"}\n"
        );
    }

    #[test]
    fn pipeline_rejects_backwards_time() {
        let mut p = VmPipeline::new("vm", Metric::CpuPercent, 5, config()).unwrap();
        p.push(Sample::new(10, 1.0)).unwrap();
        assert!(p.push(Sample::new(10, 1.0)).is_err());
    }
}
