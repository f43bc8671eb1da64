//! Metric series, smoothing, nearest-rank percentiles and CSV export.
//!
//! Throughput is a trailing 5-second moving average of per-second counts.
//! Latency percentiles come from 10-second windows of rate-weighted task
//! latencies. CPU is sampled every 2 seconds and exported with a trailing
//! 10-value moving average.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::engine::{EventKind, LogEvent, RunArtifacts};

pub const THROUGHPUT_WINDOW: usize = 5;
pub const LATENCY_WINDOW_S: u64 = 10;
pub const CPU_CADENCE_S: u64 = 2;
pub const CPU_SMOOTHING: usize = 10;

pub const METRICS_HEADER: &str = "t_s,input_tp,output_tp,lag,lat_p50_ms,lat_p90_ms,lat_p99_ms";
pub const CPU_HEADER: &str = "t_s,worker_id,cpu_util";
pub const FAILURES_HEADER: &str = "failure_idx,t_inject_s,victims";

/// Column names of `metrics.csv` that hold metric values.
pub const METRIC_COLUMNS: &[&str] =
    &["input_tp", "output_tp", "lag", "lat_p50_ms", "lat_p90_ms", "lat_p99_ms"];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: line {line}: {message}")]
    Malformed { path: PathBuf, line: usize, message: String },
    #[error("empty selection: no samples at or after t={from}")]
    EmptySelection { from: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSeries {
    pub name: String,
    pub cadence: f64,
    pub samples: Vec<Sample>,
}

impl MetricSeries {
    /// Series with samples at `start + i * cadence`.
    pub fn regular(name: &str, start: f64, cadence: f64, values: &[f64]) -> Self {
        Self {
            name: name.to_string(),
            cadence,
            samples: values
                .iter()
                .enumerate()
                .map(|(i, v)| Sample { t: start + i as f64 * cadence, value: *v })
                .collect(),
        }
    }

    pub fn values(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.value).collect()
    }

    pub fn end(&self) -> Option<f64> {
        self.samples.last().map(|s| s.t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyWindow {
    pub window_start: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
}

/// Trailing moving average: element `i` is the mean of the last `window`
/// values up to `i`, fewer at the head.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            let slice = &values[lo..=i];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect()
}

/// Nearest-rank percentile of a weighted sample: the smallest value whose
/// cumulative weight reaches `p` of the total. `p` is a fraction in (0, 1].
pub fn weighted_percentile(observations: &[(f64, f64)], p: f64) -> Option<f64> {
    let mut obs: Vec<(f64, f64)> = observations.iter().copied().filter(|(_, w)| *w > 0.0).collect();
    percentile_sorted_in_place(&mut obs, p)
}

fn percentile_sorted_in_place(obs: &mut [(f64, f64)], p: f64) -> Option<f64> {
    if obs.is_empty() {
        return None;
    }
    obs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = obs.iter().map(|(_, w)| w).sum();
    let target = p * total;
    let mut acc = 0.0;
    for (v, w) in obs.iter() {
        acc += w;
        if acc >= target {
            return Some(*v);
        }
    }
    obs.last().map(|(v, _)| *v)
}

/// p50/p90/p99 of one window in the observations' own unit.
pub fn window_percentiles(observations: &[(f64, f64)]) -> Option<(f64, f64, f64)> {
    let mut obs: Vec<(f64, f64)> = observations.iter().copied().filter(|(_, w)| *w > 0.0).collect();
    let p50 = percentile_sorted_in_place(&mut obs, 0.50)?;
    let p90 = percentile_sorted_in_place(&mut obs, 0.90)?;
    let p99 = percentile_sorted_in_place(&mut obs, 0.99)?;
    Some((p50, p90, p99))
}

/// Median of the samples at or after `from`; the lower median for even counts.
pub fn run_median(series: &MetricSeries, from: f64) -> Result<f64, MetricsError> {
    let mut vals: Vec<f64> = series.samples.iter().filter(|s| s.t >= from).map(|s| s.value).collect();
    if vals.is_empty() {
        return Err(MetricsError::EmptySelection { from });
    }
    vals.sort_by(f64::total_cmp);
    Ok(vals[(vals.len() - 1) / 2])
}

/// Input and output throughput, each the trailing 5 s average of per-second counts.
pub fn sample_throughput(artifacts: &RunArtifacts) -> (MetricSeries, MetricSeries) {
    let raw = &artifacts.raw;
    (
        MetricSeries::regular("input_tp", 1.0, 1.0, &moving_average(&raw.input_per_s, THROUGHPUT_WINDOW)),
        MetricSeries::regular("output_tp", 1.0, 1.0, &moving_average(&raw.output_per_s, THROUGHPUT_WINDOW)),
    )
}

pub fn sample_latency(artifacts: &RunArtifacts) -> &[LatencyWindow] {
    &artifacts.raw.latency_windows
}

pub fn sample_lag(artifacts: &RunArtifacts) -> MetricSeries {
    MetricSeries::regular("lag", 1.0, 1.0, &artifacts.raw.lag_per_s)
}

/// Raw 2 s CPU samples per worker, smoothed with a trailing 10-value average.
pub fn sample_cpu(artifacts: &RunArtifacts) -> Vec<(u32, MetricSeries)> {
    let mut workers: Vec<u32> = artifacts.raw.cpu.iter().map(|c| c.worker.0).collect();
    workers.sort_unstable();
    workers.dedup();
    workers
        .into_iter()
        .map(|w| {
            let own: Vec<_> = artifacts.raw.cpu.iter().filter(|c| c.worker.0 == w).collect();
            let smoothed = moving_average(&own.iter().map(|c| c.util).collect::<Vec<_>>(), CPU_SMOOTHING);
            let samples = own
                .iter()
                .zip(smoothed)
                .map(|(c, value)| Sample { t: c.t, value })
                .collect();
            (w, MetricSeries { name: format!("cpu_{w}"), cadence: CPU_CADENCE_S as f64, samples })
        })
        .collect()
}

/// Latency window in force at the end of second `t`: the most recent closed
/// window, or the first one before any has closed.
fn window_for_second(windows: &[LatencyWindow], t: u64) -> Option<&LatencyWindow> {
    if windows.is_empty() {
        return None;
    }
    let closed = (t / LATENCY_WINDOW_S) as usize;
    Some(&windows[closed.saturating_sub(1).min(windows.len() - 1)])
}

/// Per-second latency percentile series (ms) derived from the windows.
pub fn latency_series(artifacts: &RunArtifacts, column: &str) -> MetricSeries {
    let n = artifacts.raw.input_per_s.len() as u64;
    let pick = |w: &LatencyWindow| match column {
        "lat_p50_ms" => w.p50,
        "lat_p99_ms" => w.p99,
        _ => w.p90,
    };
    let values: Vec<f64> = (1..=n)
        .map(|t| window_for_second(&artifacts.raw.latency_windows, t).map(pick).unwrap_or(0.0))
        .collect();
    MetricSeries::regular(column, 1.0, 1.0, &values)
}

/// Every per-second column of `metrics.csv`, in header order.
pub fn metric_table(artifacts: &RunArtifacts) -> Vec<MetricSeries> {
    let (input, output) = sample_throughput(artifacts);
    vec![
        input,
        output,
        sample_lag(artifacts),
        latency_series(artifacts, "lat_p50_ms"),
        latency_series(artifacts, "lat_p90_ms"),
        latency_series(artifacts, "lat_p99_ms"),
    ]
}

/// Plain decimal with six significant digits and no exponent.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return "0".to_string();
    }
    let magnitude = v.abs().log10().floor() as i32 + 1;
    let decimals = (6 - magnitude).max(0) as usize;
    let s = format!("{v:.decimals$}");
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

fn format_time(t: f64) -> String {
    if t.fract() == 0.0 {
        format!("{}", t as i64)
    } else {
        format_sig6(t)
    }
}

pub fn metrics_csv(artifacts: &RunArtifacts) -> String {
    let table = metric_table(artifacts);
    let mut out = String::with_capacity(64 * table[0].samples.len());
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for i in 0..table[0].samples.len() {
        out.push_str(&format_time(table[0].samples[i].t));
        for col in &table {
            out.push(',');
            out.push_str(&format_sig6(col.samples[i].value));
        }
        out.push('\n');
    }
    out
}

pub fn cpu_csv(artifacts: &RunArtifacts) -> String {
    let mut rows: Vec<(f64, u32, f64)> = sample_cpu(artifacts)
        .into_iter()
        .flat_map(|(w, s)| s.samples.into_iter().map(move |x| (x.t, w, x.value)))
        .collect();
    rows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out = String::from(CPU_HEADER);
    out.push('\n');
    for (t, w, u) in rows {
        out.push_str(&format!("{},{},{}\n", format_time(t), w, format_sig6(u)));
    }
    out
}

pub fn failures_csv(artifacts: &RunArtifacts) -> String {
    let mut out = String::from(FAILURES_HEADER);
    out.push('\n');
    for f in &artifacts.failures {
        let victims: Vec<String> = f.victims.iter().map(|w| w.to_string()).collect();
        out.push_str(&format!("{},{},{}\n", f.index, format_time(f.time), victims.join(";")));
    }
    out
}

pub fn events_log(artifacts: &RunArtifacts) -> String {
    let mut out = String::new();
    for e in &artifacts.events {
        out.push_str(&format!("{}\t{}\t{}\n", format_sig6(e.time), e.kind, e.details));
    }
    out
}

/// Writes `contents` to `path` via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), MetricsError> {
    let io_err = |source| MetricsError::Io { path: path.to_path_buf(), source };
    let file_name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    fs::write(&tmp, contents).map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)
}

/// Writes `metrics.csv`, `cpu.csv`, `failures.csv` and `events.log`.
pub fn export_csv(artifacts: &RunArtifacts, dir: &Path) -> Result<(), MetricsError> {
    fs::create_dir_all(dir).map_err(|source| MetricsError::Io { path: dir.to_path_buf(), source })?;
    write_atomic(&dir.join("metrics.csv"), &metrics_csv(artifacts))?;
    write_atomic(&dir.join("cpu.csv"), &cpu_csv(artifacts))?;
    write_atomic(&dir.join("failures.csv"), &failures_csv(artifacts))?;
    write_atomic(&dir.join("events.log"), &events_log(artifacts))?;
    Ok(())
}

fn read(path: &Path) -> Result<String, MetricsError> {
    fs::read_to_string(path).map_err(|source| MetricsError::Io { path: path.to_path_buf(), source })
}

/// Parses a `metrics.csv`-shaped document into one series per column.
pub fn parse_metrics_csv(text: &str, path: &Path) -> Result<Vec<MetricSeries>, MetricsError> {
    let bad = |line: usize, message: String| MetricsError::Malformed { path: path.to_path_buf(), line, message };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| bad(1, "missing header".into()))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    if columns.first() != Some(&"t_s") {
        return Err(bad(1, "first column must be `t_s`".into()));
    }
    let mut series: Vec<MetricSeries> = columns[1..]
        .iter()
        .map(|c| MetricSeries { name: c.to_string(), cadence: 1.0, samples: Vec::new() })
        .collect();
    let mut last_t = f64::NEG_INFINITY;
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            return Err(bad(idx + 1, format!("expected {} fields, found {}", columns.len(), fields.len())));
        }
        let parse = |s: &str| -> Result<f64, MetricsError> {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(idx + 1, format!("not a number: `{s}`")))
        };
        let t = parse(fields[0])?;
        if t <= last_t {
            return Err(bad(idx + 1, "time column not strictly increasing".into()));
        }
        last_t = t;
        for (s, f) in series.iter_mut().zip(&fields[1..]) {
            s.samples.push(Sample { t, value: parse(f)? });
        }
    }
    for s in &mut series {
        if s.samples.len() >= 2 {
            s.cadence = s.samples[1].t - s.samples[0].t;
        }
    }
    Ok(series)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricSeries>, MetricsError> {
    parse_metrics_csv(&read(path)?, path)
}

/// Ground-truth injection rows: (failure index, injection time, victim ids).
pub fn parse_failures_csv(text: &str, path: &Path) -> Result<Vec<(usize, f64, Vec<u32>)>, MetricsError> {
    let bad = |line: usize, message: String| MetricsError::Malformed { path: path.to_path_buf(), line, message };
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 {
            if line.trim() != FAILURES_HEADER {
                return Err(bad(1, format!("expected header `{FAILURES_HEADER}`")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(bad(idx + 1, format!("expected 3 fields, found {}", fields.len())));
        }
        let index = fields[0].trim().parse().map_err(|_| bad(idx + 1, "bad failure_idx".into()))?;
        let t: f64 = fields[1].trim().parse().map_err(|_| bad(idx + 1, "bad t_inject_s".into()))?;
        let victims = fields[2]
            .split(';')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse::<u32>().map_err(|_| bad(idx + 1, format!("bad victim `{s}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        out.push((index, t, victims));
    }
    Ok(out)
}

pub fn read_failures_csv(path: &Path) -> Result<Vec<(usize, f64, Vec<u32>)>, MetricsError> {
    parse_failures_csv(&read(path)?, path)
}

/// Parses an `events.log` written by [`events_log`].
pub fn parse_event_log(text: &str, path: &Path) -> Result<Vec<LogEvent>, MetricsError> {
    let bad = |line: usize, message: String| MetricsError::Malformed { path: path.to_path_buf(), line, message };
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let (Some(t), Some(kind), details) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad(idx + 1, "expected `time<TAB>KIND<TAB>details`".into()));
        };
        let time = t.trim().parse().map_err(|_| bad(idx + 1, format!("bad time `{t}`")))?;
        let kind = match kind {
            "KILL" => EventKind::Kill,
            "JOIN" => EventKind::Join,
            "REBALANCE" => EventKind::Rebalance,
            other => return Err(bad(idx + 1, format!("unknown event kind `{other}`"))),
        };
        out.push(LogEvent { time, kind, details: details.unwrap_or("").to_string() });
    }
    Ok(out)
}

pub fn read_event_log(path: &Path) -> Result<Vec<LogEvent>, MetricsError> {
    parse_event_log(&read(path)?, path)
}

fn detail<'a>(details: &'a str, key: &str) -> Option<&'a str> {
    details.split_whitespace().find_map(|kv| kv.strip_prefix(key)?.strip_prefix('='))
}

/// Probing rounds each failure needed to get back to imbalance <= 1, counted
/// from its last replacement join. `None` when the next failure came first.
pub fn convergence_rounds(events: &[LogEvent]) -> Vec<Option<usize>> {
    let mut starts: Vec<usize> = Vec::new();
    for (i, e) in events.iter().enumerate() {
        let first_of_group = starts.last().is_none_or(|s| events[*s].time != e.time);
        if e.kind == EventKind::Kill && first_of_group {
            starts.push(i);
        }
    }
    starts
        .iter()
        .enumerate()
        .map(|(n, start)| {
            let end = starts.get(n + 1).copied().unwrap_or(events.len());
            let span = &events[*start..end];
            let last_join = span.iter().rposition(|e| e.kind == EventKind::Join)?;
            let mut rounds = 0;
            for e in &span[last_join + 1..] {
                if e.kind != EventKind::Rebalance || detail(&e.details, "trigger") != Some("probe") {
                    continue;
                }
                rounds += 1;
                if detail(&e.details, "imbalance").and_then(|v| v.parse::<usize>().ok()).is_some_and(|v| v <= 1) {
                    return Some(rounds);
                }
            }
            None
        })
        .collect()
}
