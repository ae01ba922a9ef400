//! `rads`: simulate workloads, train and persist per-VM models, detect
//! anomalies offline or online, and evaluate feature modes.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rayon::prelude::*;

use rads::eval::{self, TrainedModel};
use rads::ingest::{self, MetricRecord, ReplaySpeed, TraceMapping};
use rads::modelstore::{ModelKey, ModelRecord, ModelStore};
use rads::{
    compare_modes, generate, preset, AlertSink, DetectorConfig, EvalCase, FeatureMode, Metric,
    OccModel, PipelineEvent, Preset, Profile, RawSeries, ScenarioSpec, VmPipeline,
};

const STORE_ENV: &str = "RADS_STORE";
const DEFAULT_WINDOW_LEN: i64 = 60;

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_DATA: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "rads", version, about = "Real-time VM anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a labelled synthetic workload as canonical CSV plus a truth file.
    Simulate(SimulateArgs),
    /// Train one model per (vm, metric) and save it to the model store.
    Train(TrainArgs),
    /// Classify every window of the input with stored models.
    Detect(DetectArgs),
    /// Run the online detector and training optimiser over the input.
    Run(RunArgs),
    /// Compare feature modes on labelled inputs.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Avg,
    Entropy,
    AvgSd,
}

impl From<ModeArg> for FeatureMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Avg => FeatureMode::AverageOnly,
            ModeArg::Entropy => FeatureMode::EntropyOnly,
            ModeArg::AvgSd => FeatureMode::AvgSd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MetricArg {
    Cpu,
    Net,
    Both,
}

impl MetricArg {
    fn metrics(self) -> &'static [Metric] {
        match self {
            MetricArg::Cpu => &[Metric::CpuPercent],
            MetricArg::Net => &[Metric::NetKbps],
            MetricArg::Both => &[Metric::CpuPercent, Metric::NetKbps],
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProfileArg {
    Cpu,
    Net,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Cpu => Profile::Cpu,
            ProfileArg::Net => Profile::Net,
        }
    }
}

#[derive(Debug, Args)]
struct DetectorArgs {
    /// Window length in seconds [default: 60, or 12 samples for external traces].
    #[arg(long)]
    window_len: Option<i64>,
    /// Stability period threshold in minutes.
    #[arg(long, default_value_t = 30)]
    spt: u32,
    /// Feature mode.
    #[arg(long, value_enum, default_value = "avg-sd")]
    mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl DetectorArgs {
    fn config(&self, window_len: i64) -> DetectorConfig {
        DetectorConfig {
            window_len,
            spt_minutes: self.spt,
            mode: self.mode.into(),
            seed: self.seed,
            ..DetectorConfig::default()
        }
    }
}

#[derive(Debug, Args)]
struct InputArgs {
    /// Canonical CSV (vm_id,timestamp,cpu_percent,net_kbps).
    #[arg(long, conflicts_with = "trace", required_unless_present = "trace")]
    input: Option<PathBuf>,
    /// External trace file, or a directory of per-VM trace files.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// key=value column mapping for --trace [default: Bitbrains layout].
    #[arg(long, requires = "trace")]
    mapping: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "cpu")]
    metric: MetricArg,
}

impl InputArgs {
    fn is_trace(&self) -> bool {
        self.trace.is_some()
    }

    fn load(&self) -> anyhow::Result<Vec<RawSeries>> {
        let records = match (&self.input, &self.trace) {
            (Some(path), _) => read_canonical(path)?,
            (None, Some(path)) => read_traces(path, self.mapping.as_deref())?,
            (None, None) => bail!(rads::Error::InvalidInput("no input given".into())),
        };
        let mut series = Vec::new();
        for &metric in self.metric.metrics() {
            series.extend(ingest::to_series(&records, metric, None)?);
        }
        if series.is_empty() {
            bail!(rads::Error::EmptyInput("input has no samples"));
        }
        Ok(series)
    }

    fn window_len(&self, explicit: Option<i64>, series: &RawSeries) -> i64 {
        match explicit {
            Some(w) => w,
            None if self.is_trace() => ingest::trace_window_len(series.sample_interval()),
            None => DEFAULT_WINDOW_LEN,
        }
    }
}

#[derive(Debug, Args)]
struct StoreArgs {
    /// Model store directory; the RADS_STORE environment variable overrides it.
    #[arg(long)]
    store: Option<PathBuf>,
}

impl StoreArgs {
    fn resolve(&self) -> Option<PathBuf> {
        std::env::var_os(STORE_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
            .or_else(|| self.store.clone())
    }

    fn require(&self) -> anyhow::Result<ModelStore> {
        match self.resolve() {
            Some(root) => Ok(ModelStore::new(root)),
            None => Err(UsageError(
                "a model store is required: pass --store or set RADS_STORE".into(),
            )
            .into()),
        }
    }
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Named scenario: attack_test, spike_test, figure5_timeline,
    /// media_streaming_normal or graph_analytics_normal.
    #[arg(long, conflicts_with = "spec", required_unless_present = "spec")]
    preset: Option<String>,
    /// JSON scenario file instead of a preset.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "cpu")]
    profile: ProfileArg,
    /// Overrides the seed of a preset or scenario file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Truth sidecar path [default: <out stem>.truth.csv].
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    detector: DetectorArgs,
    #[command(flatten)]
    store: StoreArgs,
    /// Worker threads [default: number of processors].
    #[arg(long)]
    parallelism: Option<usize>,
}

#[derive(Debug, Args)]
struct DetectArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    detector: DetectorArgs,
    #[command(flatten)]
    store: StoreArgs,
    /// Alert sink (JSON lines) [default: stdout].
    #[arg(long)]
    alert_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    detector: DetectorArgs,
    #[command(flatten)]
    store: StoreArgs,
    /// Replay pace: "max", or stream seconds per wall-clock second.
    #[arg(long, default_value = "max", value_parser = parse_speed)]
    speed: ReplaySpeed,
    /// Alert sink (JSON lines) [default: stdout].
    #[arg(long)]
    alert_out: Option<PathBuf>,
    /// Every detection and optimiser event as JSON lines.
    #[arg(long)]
    events_out: Option<PathBuf>,
    /// Pipelines run concurrently [default: number of processors].
    #[arg(long)]
    parallelism: Option<usize>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Canonical CSV; repeat together with --truth.
    #[arg(long, required = true)]
    input: Vec<PathBuf>,
    /// Truth file (window_end,label) for the --input at the same position.
    #[arg(long, required = true)]
    truth: Vec<PathBuf>,
    /// Modes to compare; repeatable [default: all three].
    #[arg(long, value_enum)]
    mode: Vec<ModeArg>,
    #[arg(long, value_enum, default_value = "cpu")]
    metric: MetricArg,
    /// Window length in seconds.
    #[arg(long, default_value_t = DEFAULT_WINDOW_LEN)]
    window_len: i64,
    #[arg(long, default_value_t = 30)]
    spt: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Machine-readable report (mode,tp,fp,fn,tn,precision,recall,f1,fpr).
    #[arg(long)]
    report_csv: Option<PathBuf>,
}

/// Invalid combination of otherwise well-formed flags.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn parse_speed(s: &str) -> Result<ReplaySpeed, String> {
    s.parse().map_err(|e: rads::Error| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train(a),
        Command::Detect(a) => detect(a),
        Command::Run(a) => run(a),
        Command::Evaluate(a) => evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rads: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<rads::Error>() {
            return match e {
                rads::Error::Io(_) | rads::Error::NotFound(_) => EXIT_IO,
                rads::Error::UnknownPreset(_) => EXIT_USAGE,
                e if e.is_data_format() => EXIT_DATA,
                _ => EXIT_FAILURE,
            };
        }
        if cause.is::<io::Error>() {
            return EXIT_IO;
        }
        if cause.is::<serde_json::Error>() {
            return EXIT_DATA;
        }
    }
    EXIT_FAILURE
}

fn read_canonical(path: &Path) -> anyhow::Result<Vec<MetricRecord>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    ingest::parse_canonical_csv(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn read_traces(path: &Path, mapping: Option<&Path>) -> anyhow::Result<Vec<MetricRecord>> {
    let mapping = match mapping {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TraceMapping::from_config_str(&text)
                .with_context(|| format!("parsing {}", p.display()))?
        }
        None => TraceMapping::bitbrains(),
    };
    let files = if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<io::Result<_>>()?;
        files.retain(|p| p.is_file());
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };
    let mut records = Vec::new();
    for file in files {
        let vm_id = file
            .file_stem()
            .and_then(|s| s.to_str())
            .with_context(|| format!("{} has no usable file name", file.display()))?
            .to_string();
        let bytes = fs::read(&file).with_context(|| format!("reading {}", file.display()))?;
        records.extend(
            ingest::parse_external_trace(&bytes, &mapping, &vm_id)
                .with_context(|| format!("parsing {}", file.display()))?,
        );
    }
    Ok(records)
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn sink(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn thread_pool(parallelism: Option<usize>) -> anyhow::Result<rayon::ThreadPool> {
    if parallelism == Some(0) {
        return Err(UsageError("--parallelism must be at least 1".into()).into());
    }
    let threads =
        parallelism.unwrap_or_else(|| thread::available_parallelism().map_or(1, |n| n.get()));
    Ok(rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()?)
}

fn simulate(args: SimulateArgs) -> anyhow::Result<()> {
    let mut spec: ScenarioSpec = match (&args.preset, &args.spec) {
        (Some(name), _) => preset(
            name.parse::<Preset>()?,
            args.profile.into(),
            args.seed.unwrap_or(1),
        ),
        (None, Some(path)) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        (None, None) => return Err(UsageError("pass --preset or --spec".into()).into()),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let labeled = generate(&spec)?;
    let truth_path = args.truth.clone().unwrap_or_else(|| {
        let stem = args
            .out
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("scenario");
        args.out.with_file_name(format!("{stem}.truth.csv"))
    });

    let mut out = create(&args.out)?;
    labeled.write_csv(&mut out)?;
    out.flush()?;
    let mut truth = create(&truth_path)?;
    labeled.write_truth(&mut truth)?;
    truth.flush()?;
    eprintln!(
        "wrote {} samples to {} and {} labelled windows ({} anomalous) to {}",
        labeled.series.len(),
        args.out.display(),
        labeled.truth.len(),
        labeled.anomaly_windows(),
        truth_path.display()
    );
    Ok(())
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let store = args.store.require()?;
    let series = args.input.load()?;
    let pool = thread_pool(args.parallelism)?;
    let trained: Vec<anyhow::Result<TrainedModel>> = pool.install(|| {
        series
            .par_iter()
            .map(|s| {
                let config = args
                    .detector
                    .config(args.input.window_len(args.detector.window_len, s));
                eval::train_online(s, &config)
                    .with_context(|| format!("training vm {} ({})", s.vm_id(), s.metric()))
            })
            .collect()
    });
    // saves run in input order so versions are assigned deterministically
    for (s, t) in series.iter().zip(trained) {
        let t = t?;
        let key = ModelKey::new(s.vm_id(), s.metric(), args.detector.mode.into());
        let version = store.save(&ModelRecord::new(key, t.model, Some(t.state)))?;
        let completed = t.completed_at_minute.map_or_else(
            || "training incomplete".to_string(),
            |m| format!("completed at minute {m}"),
        );
        println!(
            "{} {}: model v{version}, {} retrain(s), {completed}",
            s.vm_id(),
            s.metric(),
            t.retrains
        );
    }
    Ok(())
}

fn detect(args: DetectArgs) -> anyhow::Result<()> {
    let store = args.store.require()?;
    let series = args.input.load()?;
    let mode: FeatureMode = args.detector.mode.into();
    let mut results = Vec::new();
    for s in &series {
        let key = ModelKey::new(s.vm_id(), s.metric(), mode);
        let record = store.load(&key).with_context(|| {
            format!(
                "loading model for vm {} ({}, {mode})",
                s.vm_id(),
                s.metric()
            )
        })?;
        let window_len = args.input.window_len(args.detector.window_len, s);
        let verdicts = eval::detect_frozen(&record.model, s, window_len)?;
        let anomalies = verdicts.iter().filter(|d| d.alert_emitted).count();
        eprintln!(
            "{} {}: {} windows, {anomalies} anomalous (model v{})",
            s.vm_id(),
            s.metric(),
            verdicts.len(),
            record.model_version
        );
        results.extend(verdicts);
    }
    results.sort_by_key(|d| d.window_end);
    let mut alerts = AlertSink::new(sink(args.alert_out.as_deref())?);
    for r in &results {
        alerts.offer(r)?;
    }
    alerts.flush()?;
    Ok(())
}

struct Finished {
    events: Vec<PipelineEvent>,
    model: Option<(OccModel, rads::detector::VmTrainingState)>,
}

fn new_pipeline(args: &RunArgs, s: &RawSeries) -> anyhow::Result<VmPipeline> {
    let config = args
        .detector
        .config(args.input.window_len(args.detector.window_len, s));
    Ok(VmPipeline::new(
        s.vm_id(),
        s.metric(),
        s.sample_interval(),
        config,
    )?)
}

fn finish(mut p: VmPipeline, mut events: Vec<PipelineEvent>) -> Finished {
    events.extend(p.finish());
    let (state, model) = p.into_parts();
    Finished {
        events,
        model: model.map(|m| (m, state)),
    }
}

fn run(args: RunArgs) -> anyhow::Result<()> {
    let store = args.store.resolve().map(ModelStore::new);
    let series = args.input.load()?;
    let mut alerts = AlertSink::new(sink(args.alert_out.as_deref())?);
    let mut events_out = args.events_out.as_deref().map(create).transpose()?;

    let mut emit = |e: &PipelineEvent| -> anyhow::Result<()> {
        if let PipelineEvent::Detection(d) = e {
            if alerts.offer(d)? {
                alerts.flush()?;
            }
        }
        if let PipelineEvent::Tick(t) = e {
            info!("{} {} window {}: {:?}", t.vm_id, t.metric, t.window, t.kind);
        }
        if let Some(out) = events_out.as_mut() {
            serde_json::to_writer(&mut *out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    };

    let finished: Vec<Finished> = match args.speed {
        ReplaySpeed::Max => {
            let pool = thread_pool(args.parallelism)?;
            let finished: Vec<Finished> = pool.install(|| {
                series
                    .par_iter()
                    .map(|s| {
                        let mut p = new_pipeline(&args, s)?;
                        let mut events = Vec::new();
                        for sample in s.samples() {
                            events.extend(p.push(*sample)?);
                        }
                        Ok(finish(p, events))
                    })
                    .collect::<anyhow::Result<_>>()
            })?;
            let mut merged: Vec<&PipelineEvent> = finished.iter().flat_map(|f| &f.events).collect();
            merged.sort_by_key(|e| e.timestamp());
            for e in merged {
                emit(e)?;
            }
            finished
        }
        ReplaySpeed::Factor(factor) => {
            // one paced stream in global timestamp order; events go out as they occur
            let mut pipelines: Vec<VmPipeline> = series
                .iter()
                .map(|s| new_pipeline(&args, s))
                .collect::<anyhow::Result<_>>()?;
            let mut order: Vec<(i64, usize, usize)> = series
                .iter()
                .enumerate()
                .flat_map(|(i, s)| {
                    s.samples()
                        .iter()
                        .enumerate()
                        .map(move |(j, x)| (x.timestamp, i, j))
                })
                .collect();
            order.sort_unstable();
            let mut prev: Option<i64> = None;
            for (ts, i, j) in order {
                if let Some(p) = prev {
                    if ts > p {
                        thread::sleep(Duration::from_secs_f64((ts - p) as f64 / factor));
                    }
                }
                prev = Some(ts);
                for e in pipelines[i].push(series[i].samples()[j])? {
                    emit(&e)?;
                }
            }
            pipelines
                .into_iter()
                .map(|p| {
                    let f = finish(p, Vec::new());
                    f.events.iter().try_for_each(&mut emit)?;
                    Ok(f)
                })
                .collect::<anyhow::Result<_>>()?
        }
    };
    alerts.flush()?;
    if let Some(mut out) = events_out {
        out.flush()?;
    }

    if let Some(store) = store {
        for (s, f) in series.iter().zip(finished) {
            let Some((model, state)) = f.model else {
                warn!("{} {}: no model to save", s.vm_id(), s.metric());
                continue;
            };
            let key = ModelKey::new(s.vm_id(), s.metric(), args.detector.mode.into());
            let version = store.save(&ModelRecord::new(key, model, Some(state)))?;
            info!("{} {}: saved model v{version}", s.vm_id(), s.metric());
        }
    }
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    if args.input.len() != args.truth.len() {
        return Err(UsageError(format!(
            "{} --input but {} --truth; pass them in pairs",
            args.input.len(),
            args.truth.len()
        ))
        .into());
    }
    let mut cases = Vec::new();
    for (input, truth_path) in args.input.iter().zip(&args.truth) {
        let records = read_canonical(input)?;
        let text = fs::read_to_string(truth_path)
            .with_context(|| format!("reading {}", truth_path.display()))?;
        let truth = eval::read_truth(&text, args.window_len)
            .with_context(|| format!("parsing {}", truth_path.display()))?;
        for &metric in args.metric.metrics() {
            for s in ingest::to_series(&records, metric, None)? {
                cases.push(EvalCase::split(&s, truth.clone())?);
            }
        }
    }
    let modes: Vec<FeatureMode> = if args.mode.is_empty() {
        FeatureMode::ALL.to_vec()
    } else {
        args.mode.iter().map(|&m| m.into()).collect()
    };
    let config = DetectorConfig {
        window_len: args.window_len,
        spt_minutes: args.spt,
        seed: args.seed,
        ..DetectorConfig::default()
    };
    let reports = compare_modes(&cases, &modes, &config)?;
    print!("{}", eval::format_table(&reports));
    if let Some(path) = &args.report_csv {
        let mut out = create(path)?;
        eval::write_report_csv(&reports, &mut out)?;
        out.flush()?;
    }
    Ok(())
}
