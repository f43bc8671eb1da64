//! Offline failure and recovery detection over metric traces.
//!
//! A reference mean and standard deviation are trained on the stable span
//! after warm-up. The first failure is the earliest point where the moving
//! average leaves the detection band for enough consecutive samples; later
//! failures follow at the configured period. A failure counts as recovered
//! once the moving average stays inside the recovery band for the whole
//! stabilization window before the next failure.

use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::metrics::{format_sig6, moving_average, read_failures_csv, read_metrics_csv, MetricSeries, MetricsError};
use crate::scenario::DetectorConfig;

/// Longest reference span used when no failure hint is available.
pub const MAX_REFERENCE_SPAN_S: f64 = 300.0;
pub const MIN_REFERENCE_SAMPLES: usize = 10;

/// Metrics judged by default: output throughput and p90 latency.
pub const DEFAULT_METRICS: &[&str] = &["output_tp", "lat_p90_ms"];

pub const RECOVERY_HEADER: &str = "failure_idx,t_inject_s,metric,recovered,t_recover_s,duration_s";

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("reference window [{start}, {end}) for `{metric}` holds {found} samples, need at least {MIN_REFERENCE_SAMPLES}")]
    WindowTooShort { metric: String, start: f64, end: f64, found: usize },
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceStats {
    pub metric: String,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub window: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Verdict {
    Recovered { t_recover: f64, duration: f64 },
    Unrecovered,
}

impl Verdict {
    pub fn duration(&self) -> Option<f64> {
        match self {
            Verdict::Recovered { duration, .. } => Some(*duration),
            Verdict::Unrecovered => None,
        }
    }

    pub fn is_recovered(&self) -> bool {
        matches!(self, Verdict::Recovered { .. })
    }
}

/// Reference span: from warm-up end up to the first failure hint, at most
/// [`MAX_REFERENCE_SPAN_S`] long. The end is exclusive.
pub fn reference_window(cfg: &DetectorConfig, first_failure_hint: Option<f64>) -> (f64, f64) {
    let cap = cfg.warmup_end + MAX_REFERENCE_SPAN_S;
    let end = first_failure_hint.map_or(cap, |h| h.min(cap));
    (cfg.warmup_end, end)
}

pub fn train_reference(
    series: &MetricSeries,
    cfg: &DetectorConfig,
    first_failure_hint: Option<f64>,
) -> Result<ReferenceStats, DetectorError> {
    let (start, end) = reference_window(cfg, first_failure_hint);
    let vals: Vec<f64> = series.samples.iter().filter(|s| s.t >= start && s.t < end).map(|s| s.value).collect();
    if vals.len() < MIN_REFERENCE_SAMPLES {
        return Err(DetectorError::WindowTooShort { metric: series.name.clone(), start, end, found: vals.len() });
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(ReferenceStats { metric: series.name.clone(), mean, std: var.sqrt(), window: (start, end) })
}

fn deviates(value: f64, reference: &ReferenceStats, threshold: f64) -> bool {
    (value - reference.mean).abs() > threshold * reference.mean.abs()
}

/// Injection times: the first detected deviation, then one per failure period
/// up to the end of the series.
pub fn detect_failures(series: &MetricSeries, reference: &ReferenceStats, cfg: &DetectorConfig) -> Vec<f64> {
    let ma = moving_average(&series.values(), cfg.moving_window);
    let need = cfg.detection_consecutive_samples.max(1);
    let mut run_start = None;
    let mut run_len = 0;
    let mut first = None;
    for (s, m) in series.samples.iter().zip(&ma) {
        if s.t <= reference.window.1 {
            continue;
        }
        if deviates(*m, reference, cfg.detection_threshold) {
            if run_len == 0 {
                run_start = Some(s.t);
            }
            run_len += 1;
            if run_len >= need {
                first = run_start;
                break;
            }
        } else {
            run_len = 0;
        }
    }
    let (Some(first), Some(end)) = (first, series.end()) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    let mut k = 0.0;
    loop {
        let t = first + k * cfg.failure_period;
        if t > end {
            break;
        }
        out.push(t);
        k += 1.0;
    }
    out
}

/// Earliest `t_r > t_inject` such that every moving-average sample in
/// `[t_r, t_r + stable_window]` is within the recovery band, with the whole
/// window ending by the next failure.
pub fn detect_recovery(
    series: &MetricSeries,
    reference: &ReferenceStats,
    t_inject: f64,
    cfg: &DetectorConfig,
) -> Verdict {
    let ma = moving_average(&series.values(), cfg.moving_window);
    let deadline = t_inject + cfg.failure_period;
    let mut streak_start: Option<f64> = None;
    for (s, m) in series.samples.iter().zip(&ma) {
        if s.t <= t_inject {
            continue;
        }
        if deviates(*m, reference, cfg.recovery_threshold) {
            streak_start = None;
            continue;
        }
        let start = *streak_start.get_or_insert(s.t);
        if start + cfg.stable_window > deadline {
            break;
        }
        if s.t >= start + cfg.stable_window {
            return Verdict::Recovered { t_recover: start, duration: start - t_inject };
        }
    }
    Verdict::Unrecovered
}

#[derive(Debug, Clone, PartialEq)]
pub struct FailureVerdicts {
    pub index: usize,
    pub t_inject: f64,
    pub verdicts: Vec<(String, Verdict)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryReport {
    pub metrics: Vec<String>,
    pub references: Vec<ReferenceStats>,
    pub failures: Vec<FailureVerdicts>,
}

impl RecoveryReport {
    pub fn verdicts_for<'a>(&'a self, metric: &'a str) -> impl Iterator<Item = Verdict> + 'a {
        self.failures
            .iter()
            .flat_map(move |f| f.verdicts.iter().filter(move |(m, _)| m == metric).map(|(_, v)| *v))
    }

    pub fn recovered_fraction(&self, metric: &str) -> Option<f64> {
        let all: Vec<Verdict> = self.verdicts_for(metric).collect();
        if all.is_empty() {
            return None;
        }
        Some(all.iter().filter(|v| v.is_recovered()).count() as f64 / all.len() as f64)
    }

    /// Lower median of recovered durations; `None` when nothing recovered.
    pub fn median_duration(&self, metric: &str) -> Option<f64> {
        let mut d: Vec<f64> = self.verdicts_for(metric).filter_map(|v| v.duration()).collect();
        if d.is_empty() {
            return None;
        }
        d.sort_by(f64::total_cmp);
        Some(d[(d.len() - 1) / 2])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(RECOVERY_HEADER);
        out.push('\n');
        for f in &self.failures {
            for (metric, verdict) in &f.verdicts {
                let t = format_sig6(f.t_inject);
                match verdict {
                    Verdict::Recovered { t_recover, duration } => out.push_str(&format!(
                        "{},{},{},1,{},{}\n",
                        f.index,
                        t,
                        metric,
                        format_sig6(*t_recover),
                        format_sig6(*duration)
                    )),
                    Verdict::Unrecovered => out.push_str(&format!("{},{},{},0,,\n", f.index, t, metric)),
                }
            }
        }
        out
    }
}

impl fmt::Display for RecoveryReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>7} {:>10}  {:<12} {:>11} {:>10}", "failure", "t_inject_s", "metric", "verdict", "duration_s")?;
        for fail in &self.failures {
            for (metric, verdict) in &fail.verdicts {
                let (label, dur) = match verdict {
                    Verdict::Recovered { duration, .. } => ("recovered", format_sig6(*duration)),
                    Verdict::Unrecovered => ("unrecovered", "-".to_string()),
                };
                writeln!(f, "{:>7} {:>10}  {:<12} {:>11} {:>10}", fail.index, format_sig6(fail.t_inject), metric, label, dur)?;
            }
        }
        for m in &self.metrics {
            let frac = self.recovered_fraction(m).map_or("-".to_string(), |x| format!("{:.0}%", x * 100.0));
            let med = self.median_duration(m).map_or("-".to_string(), format_sig6);
            writeln!(f, "summary {m}: recovered {frac}, median duration {med} s")?;
        }
        Ok(())
    }
}

/// Verdicts for each of `metrics`. Injection times come from `ground_truth`
/// when given, otherwise from detection on the first listed metric.
pub fn build_report(
    series: &[MetricSeries],
    metrics: &[&str],
    cfg: &DetectorConfig,
    ground_truth: Option<&[f64]>,
) -> Result<RecoveryReport, DetectorError> {
    let find = |name: &str| {
        series.iter().find(|s| s.name == name).ok_or_else(|| DetectorError::UnknownMetric(name.to_string()))
    };
    let selected: Vec<&MetricSeries> = metrics.iter().map(|m| find(m)).collect::<Result<_, _>>()?;
    let hint = ground_truth.and_then(|g| g.first().copied());
    let references: Vec<ReferenceStats> =
        selected.iter().map(|s| train_reference(s, cfg, hint)).collect::<Result<_, _>>()?;

    let injections = match ground_truth {
        Some(g) => g.to_vec(),
        None => selected
            .first()
            .map(|s| detect_failures(s, &references[0], cfg))
            .unwrap_or_default(),
    };
    let failures = injections
        .iter()
        .enumerate()
        .map(|(index, t)| FailureVerdicts {
            index,
            t_inject: *t,
            verdicts: selected
                .iter()
                .zip(&references)
                .map(|(s, r)| (s.name.clone(), detect_recovery(s, r, *t, cfg)))
                .collect(),
        })
        .collect();
    Ok(RecoveryReport { metrics: metrics.iter().map(|m| m.to_string()).collect(), references, failures })
}

/// [`build_report`] over files on disk.
pub fn build_report_from_files(
    metrics_csv: &Path,
    ground_truth: Option<&Path>,
    metrics: &[&str],
    cfg: &DetectorConfig,
) -> Result<RecoveryReport, DetectorError> {
    let series = read_metrics_csv(metrics_csv)?;
    let truth = match ground_truth {
        Some(p) => Some(read_failures_csv(p)?.into_iter().map(|(_, t, _)| t).collect::<Vec<_>>()),
        None => None,
    };
    build_report(&series, metrics, cfg, truth.as_deref())
}

/// Reads a `recovery.csv` back into a report without reference statistics.
pub fn parse_recovery_csv(text: &str, path: &Path) -> Result<RecoveryReport, MetricsError> {
    let bad = |line: usize, message: String| MetricsError::Malformed { path: path.to_path_buf(), line, message };
    let mut metrics: Vec<String> = Vec::new();
    let mut failures: Vec<FailureVerdicts> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let n = idx + 1;
        if idx == 0 {
            if line.trim() != RECOVERY_HEADER {
                return Err(bad(1, format!("expected header `{RECOVERY_HEADER}`")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 6 {
            return Err(bad(n, format!("expected 6 fields, found {}", f.len())));
        }
        let num = |s: &str, what: &str| s.parse::<f64>().map_err(|_| bad(n, format!("bad {what} `{s}`")));
        let index: usize = f[0].parse().map_err(|_| bad(n, format!("bad failure_idx `{}`", f[0])))?;
        let t_inject = num(f[1], "t_inject_s")?;
        let verdict = match f[3] {
            "1" => Verdict::Recovered { t_recover: num(f[4], "t_recover_s")?, duration: num(f[5], "duration_s")? },
            "0" => Verdict::Unrecovered,
            other => return Err(bad(n, format!("bad recovered flag `{other}`"))),
        };
        if !metrics.iter().any(|m| m == f[2]) {
            metrics.push(f[2].to_string());
        }
        match failures.last_mut() {
            Some(last) if last.index == index => last.verdicts.push((f[2].to_string(), verdict)),
            _ => failures.push(FailureVerdicts { index, t_inject, verdicts: vec![(f[2].to_string(), verdict)] }),
        }
    }
    Ok(RecoveryReport { metrics, references: Vec::new(), failures })
}

pub fn read_recovery_csv(path: &Path) -> Result<RecoveryReport, MetricsError> {
    let text = std::fs::read_to_string(path).map_err(|source| MetricsError::Io { path: path.to_path_buf(), source })?;
    parse_recovery_csv(&text, path)
}
