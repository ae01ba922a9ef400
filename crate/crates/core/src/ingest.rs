//! Trace ingestion: the canonical CSV format, an adapter for delimited
//! external traces with a configurable column mapping, VM selection for trace
//! experiments, and paced replay.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::str::FromStr;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::{Metric, RawSeries, Sample};
use crate::timeseries::iqr_spike_flags;

pub const CANONICAL_HEADER: [&str; 4] = ["vm_id", "timestamp", "cpu_percent", "net_kbps"];
/// Window length in samples used for coarse-cadence traces.
pub const TRACE_SAMPLES_PER_WINDOW: i64 = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub vm_id: String,
    /// Seconds.
    pub timestamp: i64,
    pub cpu_percent: f64,
    pub net_kbps: f64,
}

impl MetricRecord {
    pub fn value(&self, metric: Metric) -> f64 {
        match metric {
            Metric::CpuPercent => self.cpu_percent,
            Metric::NetKbps => self.net_kbps,
        }
    }
}

fn parse_value(field: &str, name: &str, line: usize) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("{name}: '{field}' is not a number"),
    })?;
    if !v.is_finite() || v < 0.0 {
        return Err(Error::Parse {
            line,
            message: format!("{name}: {v} must be finite and non-negative"),
        });
    }
    Ok(v)
}

fn parse_timestamp(field: &str, line: usize) -> Result<i64> {
    field.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("timestamp: '{field}' is not an integer number of seconds"),
    })
}

/// Rejects a record whose timestamp is earlier than the previous one for the
/// same VM.
struct OrderCheck(HashMap<String, i64>);

impl OrderCheck {
    fn new() -> Self {
        Self(HashMap::new())
    }

    fn check(&mut self, vm_id: &str, timestamp: i64, line: usize) -> Result<()> {
        if let Some(&previous) = self.0.get(vm_id) {
            if timestamp < previous {
                return Err(Error::Ordering {
                    line,
                    vm_id: vm_id.to_string(),
                    timestamp,
                    previous,
                });
            }
        }
        self.0.insert(vm_id.to_string(), timestamp);
        Ok(())
    }
}

/// Parses `vm_id,timestamp,cpu_percent,net_kbps` rows. Line numbers in errors
/// are 1-based and count the header.
pub fn parse_canonical_csv(bytes: &[u8]) -> Result<Vec<MetricRecord>> {
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Err(Error::EmptyInput("canonical csv is empty"));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let header = reader.headers()?.clone();
    if header.iter().ne(CANONICAL_HEADER.iter().copied()) {
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "expected header '{}', found '{}'",
                CANONICAL_HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }

    let mut order = OrderCheck::new();
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::Parse {
                line,
                message: e.to_string(),
            }
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        if row.len() != 4 {
            return Err(Error::Parse {
                line,
                message: format!("expected 4 fields, found {}", row.len()),
            });
        }
        let vm_id = row[0].to_string();
        if vm_id.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty vm_id".into(),
            });
        }
        let timestamp = parse_timestamp(&row[1], line)?;
        let cpu_percent = parse_value(&row[2], "cpu_percent", line)?;
        let net_kbps = parse_value(&row[3], "net_kbps", line)?;
        order.check(&vm_id, timestamp, line)?;
        out.push(MetricRecord {
            vm_id,
            timestamp,
            cpu_percent,
            net_kbps,
        });
    }
    Ok(out)
}

/// Writes records in the canonical format. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn emit_canonical_csv<W: Write>(records: &[MetricRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CANONICAL_HEADER)?;
    for r in records {
        w.write_record([
            r.vm_id.clone(),
            r.timestamp.to_string(),
            r.cpu_percent.to_string(),
            r.net_kbps.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Median gap between consecutive timestamps.
pub fn infer_sample_interval(timestamps: &[i64]) -> Result<i64> {
    let mut gaps: Vec<i64> = timestamps
        .windows(2)
        .map(|w| w[1] - w[0])
        .filter(|g| *g > 0)
        .collect();
    if gaps.is_empty() {
        return Err(Error::InsufficientData {
            what: "sample interval inference",
            needed: 2,
            got: timestamps.len(),
        });
    }
    gaps.sort_unstable();
    Ok(gaps[gaps.len() / 2])
}

/// Splits records into one series per VM for `metric`, ordered by vm id.
/// When `sample_interval` is `None` it is inferred per VM.
pub fn to_series(
    records: &[MetricRecord],
    metric: Metric,
    sample_interval: Option<i64>,
) -> Result<Vec<RawSeries>> {
    let mut by_vm: BTreeMap<&str, Vec<Sample>> = BTreeMap::new();
    for r in records {
        by_vm
            .entry(r.vm_id.as_str())
            .or_default()
            .push(Sample::new(r.timestamp, r.value(metric)));
    }
    by_vm
        .into_iter()
        .map(|(vm, samples)| {
            let interval = match sample_interval {
                Some(i) => i,
                None => {
                    let ts: Vec<i64> = samples.iter().map(|s| s.timestamp).collect();
                    infer_sample_interval(&ts)?
                }
            };
            RawSeries::new(vm, metric, interval, samples)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// External traces
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRef {
    Name(String),
    /// Zero-based.
    Index(usize),
}

impl FromStr for ColumnRef {
    type Err = Error;

    /// A bare integer is an index; anything else is a header name.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() {
            return Err(Error::Mapping("empty column reference".into()));
        }
        Ok(s.parse::<usize>()
            .map(ColumnRef::Index)
            .unwrap_or_else(|_| ColumnRef::Name(s.to_string())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeUnit {
    Seconds,
    Milliseconds,
}

impl FromStr for TimeUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "s" | "sec" | "seconds" => Ok(TimeUnit::Seconds),
            "ms" | "milliseconds" => Ok(TimeUnit::Milliseconds),
            other => Err(Error::Mapping(format!("unknown time unit '{other}'"))),
        }
    }
}

/// Column layout of a delimited external trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMapping {
    /// May be longer than one character; fields are trimmed after splitting.
    pub delimiter: String,
    pub has_header: bool,
    pub ts_col: ColumnRef,
    pub cpu_col: ColumnRef,
    pub net_rx_col: ColumnRef,
    pub net_tx_col: ColumnRef,
    pub ts_unit: TimeUnit,
}

impl TraceMapping {
    /// Per-VM files of the GWA-T-12 (Bitbrains) trace. Their timestamp column
    /// is labelled milliseconds but holds seconds.
    pub fn bitbrains() -> Self {
        Self {
            delimiter: ";".into(),
            has_header: true,
            ts_col: ColumnRef::Name("Timestamp [ms]".into()),
            cpu_col: ColumnRef::Name("CPU usage [%]".into()),
            net_rx_col: ColumnRef::Name("Network received throughput [KB/s]".into()),
            net_tx_col: ColumnRef::Name("Network transmitted throughput [KB/s]".into()),
            ts_unit: TimeUnit::Seconds,
        }
    }

    /// Parses `key = value` lines (`#` starts a comment). Keys: `delimiter`,
    /// `has_header`, `timestamp`, `cpu`, `net_rx`, `net_tx`, `ts_unit`.
    /// In `delimiter`, `\t` stands for a tab and `\s` for a space.
    pub fn from_config_str(text: &str) -> Result<Self> {
        let mut kv: HashMap<String, String> = HashMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Mapping(format!("line {}: expected key = value", n + 1)))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut take = |key: &str| {
            kv.remove(key)
                .ok_or_else(|| Error::Mapping(format!("missing key '{key}'")))
        };
        let delimiter = take("delimiter")?.replace("\\t", "\t").replace("\\s", " ");
        if delimiter.is_empty() {
            return Err(Error::Mapping("empty delimiter".into()));
        }
        let mapping = Self {
            delimiter,
            has_header: match take("has_header").as_deref() {
                Ok("true") | Ok("yes") | Ok("1") | Err(_) => true,
                Ok("false") | Ok("no") | Ok("0") => false,
                Ok(other) => return Err(Error::Mapping(format!("has_header: '{other}'"))),
            },
            ts_col: take("timestamp")?.parse()?,
            cpu_col: take("cpu")?.parse()?,
            net_rx_col: take("net_rx")?.parse()?,
            net_tx_col: take("net_tx")?.parse()?,
            ts_unit: match take("ts_unit") {
                Ok(u) => u.parse()?,
                Err(_) => TimeUnit::Seconds,
            },
        };
        if let Some(extra) = kv.keys().next() {
            return Err(Error::Mapping(format!("unknown key '{extra}'")));
        }
        Ok(mapping)
    }
}

fn resolve(col: &ColumnRef, header: Option<&[String]>, width: usize) -> Result<usize> {
    match col {
        ColumnRef::Index(i) if *i < width => Ok(*i),
        ColumnRef::Index(i) => Err(Error::Mapping(format!(
            "column index {i} out of range ({width} columns)"
        ))),
        ColumnRef::Name(name) => header
            .and_then(|h| h.iter().position(|c| c == name))
            .ok_or_else(|| Error::Mapping(format!("column '{name}' not found in header"))),
    }
}

/// Parses one VM's delimited trace. Network traffic is received plus
/// transmitted; timestamps are converted to seconds.
pub fn parse_external_trace(
    bytes: &[u8],
    mapping: &TraceMapping,
    vm_id: &str,
) -> Result<Vec<MetricRecord>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        line: 0,
        message: format!("trace is not utf-8: {e}"),
    })?;
    let split = |line: &str| -> Vec<String> {
        line.split(mapping.delimiter.as_str())
            .map(|f| f.trim().to_string())
            .collect()
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());

    let header = if mapping.has_header {
        let (_, h) = lines
            .next()
            .ok_or(Error::EmptyInput("external trace is empty"))?;
        Some(split(h))
    } else {
        None
    };

    let mut indices: Option<[usize; 4]> = None;
    let mut order = OrderCheck::new();
    let mut out = Vec::new();
    for (line, raw) in lines {
        let fields = split(raw);
        let idx = match indices {
            Some(i) => i,
            None => {
                let width = header.as_ref().map_or(fields.len(), Vec::len);
                let h = header.as_deref();
                let i = [
                    resolve(&mapping.ts_col, h, width)?,
                    resolve(&mapping.cpu_col, h, width)?,
                    resolve(&mapping.net_rx_col, h, width)?,
                    resolve(&mapping.net_tx_col, h, width)?,
                ];
                indices = Some(i);
                i
            }
        };
        let field = |i: usize| {
            fields
                .get(i)
                .map(String::as_str)
                .ok_or_else(|| Error::Parse {
                    line,
                    message: format!("missing field {i}"),
                })
        };
        let ts_raw: f64 = field(idx[0])?.parse().map_err(|_| Error::Parse {
            line,
            message: format!(
                "timestamp '{}' is not a number",
                field(idx[0]).unwrap_or("")
            ),
        })?;
        let timestamp = match mapping.ts_unit {
            TimeUnit::Seconds => ts_raw,
            TimeUnit::Milliseconds => ts_raw / 1000.0,
        }
        .round() as i64;
        let cpu_percent = parse_value(field(idx[1])?, "cpu", line)?;
        let rx = parse_value(field(idx[2])?, "net_rx", line)?;
        let tx = parse_value(field(idx[3])?, "net_tx", line)?;
        order.check(vm_id, timestamp, line)?;
        out.push(MetricRecord {
            vm_id: vm_id.to_string(),
            timestamp,
            cpu_percent,
            net_kbps: rx + tx,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("external trace has no data rows"));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// VM selection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionThresholds {
    /// Percent.
    pub cpu_mean_min: f64,
    /// KB/s.
    pub net_mean_min: f64,
}

impl Default for SelectionThresholds {
    fn default() -> Self {
        Self {
            cpu_mean_min: 10.0,
            net_mean_min: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VmTraces {
    pub vm_id: String,
    pub cpu: RawSeries,
    pub net: RawSeries,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub cpu: Vec<String>,
    pub net: Vec<String>,
    /// Fraction of all VMs with at least one CPU spike.
    pub cpu_spike_share: f64,
    /// Fraction of all VMs with at least one network spike.
    pub net_spike_share: f64,
    pub total: usize,
}

fn mean_and_spiky(series: &RawSeries) -> (f64, bool) {
    let values: Vec<f64> = series.values().collect();
    if values.is_empty() {
        return (0.0, false);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let spiky = iqr_spike_flags(&values).is_ok_and(|f| !f.is_empty());
    (mean, spiky)
}

/// Keeps, per metric, the VMs whose mean exceeds the threshold and that show
/// at least one interquartile-range spike.
pub fn select_vms(traces: &[VmTraces], thresholds: &SelectionThresholds) -> Selection {
    let mut sel = Selection {
        cpu: Vec::new(),
        net: Vec::new(),
        cpu_spike_share: 0.0,
        net_spike_share: 0.0,
        total: traces.len(),
    };
    let (mut cpu_spiky, mut net_spiky) = (0usize, 0usize);
    for t in traces {
        let (cpu_mean, cpu_spike) = mean_and_spiky(&t.cpu);
        let (net_mean, net_spike) = mean_and_spiky(&t.net);
        cpu_spiky += cpu_spike as usize;
        net_spiky += net_spike as usize;
        if cpu_spike && cpu_mean > thresholds.cpu_mean_min {
            sel.cpu.push(t.vm_id.clone());
        }
        if net_spike && net_mean > thresholds.net_mean_min {
            sel.net.push(t.vm_id.clone());
        }
    }
    if !traces.is_empty() {
        sel.cpu_spike_share = cpu_spiky as f64 / traces.len() as f64;
        sel.net_spike_share = net_spiky as f64 / traces.len() as f64;
    }
    sel
}

/// Pairs CPU and network series of the same VM from canonical records.
pub fn vm_traces(records: &[MetricRecord]) -> Result<Vec<VmTraces>> {
    let cpu = to_series(records, Metric::CpuPercent, None)?;
    let net = to_series(records, Metric::NetKbps, None)?;
    Ok(cpu
        .into_iter()
        .zip(net)
        .map(|(cpu, net)| VmTraces {
            vm_id: cpu.vm_id().to_string(),
            cpu,
            net,
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Replay
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReplaySpeed {
    /// No pacing.
    Max,
    /// Stream seconds per wall-clock second.
    Factor(f64),
}

impl FromStr for ReplaySpeed {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "max" {
            return Ok(ReplaySpeed::Max);
        }
        match s.parse::<f64>() {
            Ok(f) if f > 0.0 && f.is_finite() => Ok(ReplaySpeed::Factor(f)),
            _ => Err(Error::InvalidInput(format!(
                "speed must be 'max' or a positive number, got '{s}'"
            ))),
        }
    }
}

/// Durations, in seconds, measured from the first sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplaySplit {
    pub train: i64,
    pub test: i64,
}

impl ReplaySplit {
    /// Two days of training followed by one day of testing.
    pub const TWO_ONE_DAYS: ReplaySplit = ReplaySplit {
        train: 2 * 86_400,
        test: 86_400,
    };
}

/// Test samples delivered in order, sleeping between them according to the
/// replay speed.
#[derive(Debug, Clone)]
pub struct TestStream {
    samples: Vec<Sample>,
    pos: usize,
    speed: ReplaySpeed,
}

impl TestStream {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

impl Iterator for TestStream {
    type Item = Sample;

    fn next(&mut self) -> Option<Sample> {
        let s = *self.samples.get(self.pos)?;
        if let (ReplaySpeed::Factor(f), Some(prev)) = (self.speed, self.pos.checked_sub(1)) {
            let gap = (s.timestamp - self.samples[prev].timestamp) as f64;
            thread::sleep(Duration::from_secs_f64(gap / f));
        }
        self.pos += 1;
        Some(s)
    }
}

/// Splits `series` into a materialised training series and a paced test
/// stream.
pub fn replay(
    series: &RawSeries,
    split: ReplaySplit,
    speed: ReplaySpeed,
) -> Result<(RawSeries, TestStream)> {
    let start = series
        .first_timestamp()
        .ok_or(Error::EmptyInput("series has no samples"))?;
    let train = series.slice_time(start, start + split.train);
    let test = series.slice_time(start + split.train, start + split.train + split.test);
    if train.is_empty() {
        return Err(Error::EmptyInput("training split has no samples"));
    }
    if test.is_empty() {
        return Err(Error::EmptyInput("test split has no samples"));
    }
    Ok((
        train,
        TestStream {
            samples: test.samples().to_vec(),
            pos: 0,
            speed,
        },
    ))
}

/// Window length (seconds) for a trace of the given cadence.
pub fn trace_window_len(sample_interval: i64) -> i64 {
    sample_interval * TRACE_SAMPLES_PER_WINDOW
}
