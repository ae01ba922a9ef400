//! Real-time VM anomaly detection from CPU and network metrics.
//!
//! Each (vm, metric) stream is cut into one-minute windows. A one-class
//! classifier trained only on normal history decides whether the latest
//! window is normal; a training optimiser retrains after false alarms and
//! declares training complete once the model has stayed quiet long enough.
//! Genuine short spikes are kept apart from sustained attacks by using both
//! the window average and the window standard deviation as features.

pub mod detector;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod modelstore;
pub mod occ;
pub mod series;
pub mod simulator;
pub mod timeseries;
pub mod wtsa;

pub use detector::{
    run_online, AlertSink, DetectionResult, DetectorConfig, PipelineEvent, TickKind,
    TrainingStatus, Verdict, VmPipeline,
};
pub use error::{Error, Result};
pub use eval::{compare_modes, confusion, metrics, ConfusionCounts, EvalCase, MetricsReport};
pub use occ::{occ_classify, occ_score, train_occ, OccConfig, OccModel};
pub use series::{Metric, RawSeries, Sample};
pub use simulator::{generate, preset, LabeledSeries, Preset, Profile, ScenarioSpec};
pub use wtsa::{build_test_instance, build_training_set, FeatureMode};
