//! Scoring: train with the online optimiser, freeze the model, classify every
//! labelled test window and tally against ground truth.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{
    detect, DetectionResult, DetectorConfig, PipelineEvent, TickKind, TrainingStatus, Verdict,
    VmPipeline, VmTrainingState,
};
use crate::error::{Error, Result};
use crate::occ::OccModel;
use crate::series::RawSeries;
use crate::simulator::{LabeledSeries, WindowLabel, WindowTruth};
use crate::timeseries::partition_windows;
use crate::wtsa::FeatureMode;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, o: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts::new(
            self.tp + o.tp,
            self.fp + o.fp,
            self.fn_ + o.fn_,
            self.tn + o.tn,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: Option<FeatureMode>,
    pub counts: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fpr: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall, F1 and false positive rate; every 0/0 is 0.
pub fn metrics(counts: ConfusionCounts) -> MetricsReport {
    let precision = ratio(counts.tp, counts.tp + counts.fp);
    let recall = ratio(counts.tp, counts.tp + counts.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    MetricsReport {
        mode: None,
        counts,
        precision,
        recall,
        f1,
        fpr: ratio(counts.fp, counts.fp + counts.tn),
    }
}

/// Four-way tally of verdicts against truth. Both must cover exactly the same
/// windows (matched by window end).
pub fn confusion(verdicts: &[DetectionResult], truth: &[WindowTruth]) -> Result<ConfusionCounts> {
    let mut labels: BTreeMap<i64, WindowLabel> = BTreeMap::new();
    for t in truth {
        if labels.insert(t.window_end, t.label).is_some() {
            return Err(Error::GridMismatch(format!(
                "window ending at {} labelled twice",
                t.window_end
            )));
        }
    }
    if verdicts.len() != labels.len() {
        return Err(Error::GridMismatch(format!(
            "{} verdicts for {} labelled windows",
            verdicts.len(),
            labels.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for v in verdicts {
        let label = labels.remove(&v.window_end).ok_or_else(|| {
            Error::GridMismatch(format!("no label for window ending at {}", v.window_end))
        })?;
        match (v.verdict, label) {
            (Verdict::Anomaly, WindowLabel::Anomaly) => c.tp += 1,
            (Verdict::Anomaly, WindowLabel::Normal) => c.fp += 1,
            (Verdict::Normal, WindowLabel::Anomaly) => c.fn_ += 1,
            (Verdict::Normal, WindowLabel::Normal) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Model produced by running the training optimiser over a series.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: OccModel,
    pub state: VmTrainingState,
    /// Stream minutes at which training completed, if it did.
    pub completed_at_minute: Option<i64>,
    pub retrains: usize,
}

/// Feeds `series` through a pipeline and returns the model in force at the
/// end: the completed model, or the latest one if training never completed.
pub fn train_online(series: &RawSeries, config: &DetectorConfig) -> Result<TrainedModel> {
    let mut pipeline = VmPipeline::new(
        series.vm_id(),
        series.metric(),
        series.sample_interval(),
        config.clone(),
    )?;
    let origin = series
        .first_timestamp()
        .ok_or(Error::EmptyInput("training series has no samples"))?;
    let mut events = Vec::new();
    for s in series.samples() {
        events.extend(pipeline.push(*s)?);
        if pipeline.state().status == TrainingStatus::Completed {
            break;
        }
    }
    if pipeline.state().status != TrainingStatus::Completed {
        events.extend(pipeline.finish());
    }
    let mut completed_at_minute = None;
    let mut retrains = 0;
    for e in &events {
        if let PipelineEvent::Tick(t) = e {
            match t.kind {
                TickKind::Retrained { .. } => retrains += 1,
                TickKind::Completed => completed_at_minute = Some((t.timestamp - origin) / 60),
                _ => {}
            }
        }
    }
    let (state, model) = pipeline.into_parts();
    let model = model.ok_or_else(|| Error::NotTrained {
        vm_id: series.vm_id().to_string(),
        metric: series.metric(),
    })?;
    Ok(TrainedModel {
        model,
        state,
        completed_at_minute,
        retrains,
    })
}

/// Classifies every complete window of `series` with a frozen model.
pub fn detect_frozen(
    model: &OccModel,
    series: &RawSeries,
    window_len: i64,
) -> Result<Vec<DetectionResult>> {
    let mut state = VmTrainingState::new(series.vm_id(), series.metric(), 0);
    state.status = TrainingStatus::Completed;
    partition_windows(series, window_len)?
        .iter()
        .map(|w| detect(&mut state, Some(model), w))
        .collect()
}

/// One labelled test segment and the series its model is trained on.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub training: RawSeries,
    pub test: RawSeries,
    pub truth: Vec<WindowTruth>,
}

impl EvalCase {
    pub fn from_labeled(ls: &LabeledSeries) -> Self {
        Self {
            training: ls.training_series(),
            test: ls.scored_series(),
            truth: ls.truth.clone(),
        }
    }

    /// Splits `series` at the first labelled window: everything before it
    /// trains, everything from it on is scored.
    pub fn split(series: &RawSeries, truth: Vec<WindowTruth>) -> Result<Self> {
        let from = truth
            .iter()
            .map(|t| t.window_start)
            .min()
            .ok_or(Error::EmptyInput("truth has no windows"))?;
        let start = series
            .first_timestamp()
            .ok_or(Error::EmptyInput("series has no samples"))?;
        Ok(Self {
            training: series.slice_time(start, from),
            test: series.slice_time(from, i64::MAX),
            truth,
        })
    }
}

/// Trains and scores every case under `config`, summing the counts.
pub fn evaluate(cases: &[EvalCase], config: &DetectorConfig) -> Result<MetricsReport> {
    let mut total = ConfusionCounts::default();
    for case in cases {
        let trained = train_online(&case.training, config)?;
        let verdicts = detect_frozen(&trained.model, &case.test, config.window_len)?;
        total = total + confusion(&verdicts, &case.truth)?;
    }
    let mut report = metrics(total);
    report.mode = Some(config.mode);
    Ok(report)
}

/// [`evaluate`] once per mode on identical data, in the order given.
pub fn compare_modes(
    cases: &[EvalCase],
    modes: &[FeatureMode],
    config: &DetectorConfig,
) -> Result<Vec<MetricsReport>> {
    modes
        .par_iter()
        .map(|&mode| {
            let mut c = config.clone();
            c.mode = mode;
            evaluate(cases, &c)
        })
        .collect()
}

/// Reads `window_end,label` lines (an optional header is skipped).
pub fn read_truth(text: &str, window_len: i64) -> Result<Vec<WindowTruth>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || (i == 0 && line.starts_with("window_end")) {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            line: i + 1,
            message,
        };
        let (end, label) = line
            .split_once(',')
            .ok_or_else(|| parse_err("expected window_end,label".into()))?;
        let window_end: i64 = end
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad window_end '{end}'")))?;
        let label: WindowLabel = label
            .parse()
            .map_err(|_| parse_err(format!("bad label '{label}'")))?;
        out.push(WindowTruth {
            window_start: window_end - window_len,
            window_end,
            label,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("truth file has no windows"));
    }
    Ok(out)
}

pub fn format_table(reports: &[MetricsReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<14} {:>4} {:>4} {:>4} {:>4} {:>9} {:>7} {:>5} {:>5}",
        "mode", "tp", "fp", "fn", "tn", "precision", "recall", "f1", "fpr"
    );
    for r in reports {
        let c = r.counts;
        let _ = writeln!(
            s,
            "{:<14} {:>4} {:>4} {:>4} {:>4} {:>9.2} {:>7.2} {:>5.2} {:>5.2}",
            r.mode.map_or("-", FeatureMode::as_str),
            c.tp,
            c.fp,
            c.fn_,
            c.tn,
            r.precision,
            r.recall,
            r.f1,
            r.fpr
        );
    }
    s
}

pub fn write_report_csv<W: Write>(reports: &[MetricsReport], mut out: W) -> Result<()> {
    writeln!(out, "mode,tp,fp,fn,tn,precision,recall,f1,fpr")?;
    for r in reports {
        let c = r.counts;
        writeln!(
            out,
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            r.mode.map_or("-", FeatureMode::as_str),
            c.tp,
            c.fp,
            c.fn_,
            c.tn,
            r.precision,
            r.recall,
            r.f1,
            r.fpr
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::series::Metric;

    fn verdict(end: i64, v: Verdict) -> DetectionResult {
        DetectionResult {
            vm_id: "vm".into(),
            metric: Metric::CpuPercent,
            window_end: end,
            verdict: v,
            raw_features: vec![],
            alert_emitted: false,
        }
    }

    fn truth(end: i64, l: WindowLabel) -> WindowTruth {
        WindowTruth {
            window_start: end - 60,
            window_end: end,
            label: l,
        }
    }

    #[test]
    fn tally_and_grid_checks() {
        let t = vec![
            truth(60, WindowLabel::Anomaly),
            truth(120, WindowLabel::Normal),
        ];
        let v = vec![verdict(120, Verdict::Anomaly), verdict(60, Verdict::Normal)];
        assert_eq!(confusion(&v, &t).unwrap(), ConfusionCounts::new(0, 1, 1, 0));

        let shifted = vec![verdict(60, Verdict::Normal), verdict(180, Verdict::Normal)];
        assert!(matches!(
            confusion(&shifted, &t),
            Err(Error::GridMismatch(_))
        ));
        assert!(matches!(
            confusion(&v[..1], &t),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn degenerate_counts_are_zero() {
        let r = metrics(ConfusionCounts::new(0, 0, 0, 5));
        assert_eq!((r.precision, r.recall, r.f1, r.fpr), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn truth_file_parsing() {
        let t = read_truth("window_end,label\n7260,anomaly\n7320,normal\n", 60).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].window_start, 7200);
        assert_eq!(t[1].label, WindowLabel::Normal);
        assert!(read_truth("window_end,label\n", 60).is_err());
        assert!(matches!(
            read_truth("60,maybe\n", 60),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn csv_report_layout() {
        let mut r = metrics(ConfusionCounts::new(9, 1, 1, 29));
        r.mode = Some(FeatureMode::AvgSd);
        let mut buf = Vec::new();
        write_report_csv(&[r], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "mode,tp,fp,fn,tn,precision,recall,f1,fpr\navg_sd,9,1,1,29,0.900000,0.900000,0.900000,0.033333\n"
        );
    }
}
