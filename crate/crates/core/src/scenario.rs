//! Experiment scenarios: workload, cluster, rebalance regime, failure plan and
//! detector parameters.
//!
//! Scenarios are stored as flat `section.key = value` documents, one entry per
//! line, with `#` starting a comment. Unset keys take the defaults listed in
//! [`KEYS`]; the README mirrors that table. `workload.input_rate` is the only
//! derived default: when absent it is `0.65 * cluster.num_workers *
//! cluster.worker_capacity`.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

/// Fraction of aggregate worker capacity used by the default load.
pub const DEFAULT_UTILIZATION: f64 = 0.65;

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadConfig {
    /// Aggregate records/second over all partitions.
    pub input_rate: f64,
    pub num_partitions: usize,
    /// Average number of outputs emitted per consumed record.
    pub selectivity: f64,
    /// Kept for fidelity; consumers are aggregated per task.
    pub num_consumers: usize,
    /// Seconds of processing latency per record on an idle worker.
    pub base_processing_latency: f64,
}

impl WorkloadConfig {
    pub fn expected_output_rate(&self) -> f64 {
        self.selectivity * self.input_rate
    }

    pub fn partition_rate(&self) -> f64 {
        self.input_rate / self.num_partitions as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig {
    pub num_workers: usize,
    /// Records/second a single worker can process.
    pub worker_capacity: f64,
    /// Changelog records/second a worker can replay when it does nothing else.
    pub replay_rate: f64,
    pub replacement_delay_min: f64,
    pub replacement_delay_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RebalanceConfig {
    pub probing_interval: f64,
    /// Cluster-wide cap on simultaneously warming replicas.
    pub max_warmup_replicas: usize,
    /// Changelog backlog (records) at or below which a warm-up may be promoted.
    pub acceptable_recovery_lag: f64,
    pub num_standby_replicas: usize,
    pub commit_interval: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FailurePlan {
    pub first_failure_time: f64,
    pub failure_period: f64,
    pub kills_per_failure: usize,
    pub num_failures: usize,
}

impl FailurePlan {
    pub fn injection_time(&self, index: usize) -> f64 {
        self.first_failure_time + index as f64 * self.failure_period
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub warmup_end: f64,
    pub recovery_threshold: f64,
    pub stable_window: f64,
    pub failure_period: f64,
    pub detection_threshold: f64,
    pub detection_consecutive_samples: usize,
    /// Trailing moving-average length, in samples.
    pub moving_window: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            warmup_end: 120.0,
            recovery_threshold: 0.15,
            stable_window: 160.0,
            failure_period: 720.0,
            detection_threshold: 0.15,
            detection_consecutive_samples: 3,
            moving_window: 10,
        }
    }
}

/// Simulator calibration knobs that have no counterpart in a real deployment.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    /// Fluid integration step in seconds.
    pub tick: f64,
    /// Task state size, expressed as seconds of per-partition input.
    pub state_cap: f64,
    /// CPU utilization above which processing latency stops growing; surplus
    /// load stays in the input topic as lag.
    pub contention_knee: f64,
    /// Records per task fetched into the worker ahead of processing.
    pub fetch_buffer_records: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            tick: 0.1,
            state_cap: 60.0,
            contention_knee: 0.8,
            fetch_buffer_records: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub name: String,
    pub workload: WorkloadConfig,
    pub cluster: ClusterConfig,
    pub rebalance: RebalanceConfig,
    pub failures: FailurePlan,
    pub detector: DetectorConfig,
    pub engine: EngineConfig,
    pub run_duration: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let cluster = ClusterConfig {
            num_workers: 8,
            worker_capacity: 10_000.0,
            replay_rate: 50_000.0,
            replacement_delay_min: 2.0,
            replacement_delay_max: 10.0,
        };
        Self {
            name: "default".to_string(),
            workload: WorkloadConfig {
                input_rate: default_input_rate(&cluster),
                num_partitions: 40,
                selectivity: 0.5,
                num_consumers: 20_000,
                base_processing_latency: 0.02,
            },
            cluster,
            rebalance: RebalanceConfig {
                probing_interval: 600.0,
                max_warmup_replicas: 2,
                acceptable_recovery_lag: 10_000.0,
                num_standby_replicas: 0,
                commit_interval: 2.0,
            },
            failures: FailurePlan {
                first_failure_time: 720.0,
                failure_period: 720.0,
                kills_per_failure: 2,
                num_failures: 3,
            },
            detector: DetectorConfig::default(),
            engine: EngineConfig::default(),
            run_duration: 3_600.0,
            seed: 42,
        }
    }
}

fn default_input_rate(cluster: &ClusterConfig) -> f64 {
    DEFAULT_UTILIZATION * cluster.num_workers as f64 * cluster.worker_capacity
}

/// Every recognised key with its documented default, in serialization order.
pub const KEYS: &[(&str, &str)] = &[
    ("scenario.name", "default"),
    ("scenario.run_duration_s", "3600"),
    ("scenario.seed", "42"),
    ("workload.input_rate", "0.65 * num_workers * worker_capacity"),
    ("workload.num_partitions", "40"),
    ("workload.selectivity", "0.5"),
    ("workload.num_consumers", "20000"),
    ("workload.base_processing_latency_s", "0.02"),
    ("cluster.num_workers", "8"),
    ("cluster.worker_capacity", "10000"),
    ("cluster.replay_rate", "50000"),
    ("cluster.replacement_delay_min_s", "2"),
    ("cluster.replacement_delay_max_s", "10"),
    ("rebalance.probing_interval_s", "600"),
    ("rebalance.max_warmup_replicas", "2"),
    ("rebalance.acceptable_recovery_lag", "10000"),
    ("rebalance.num_standby_replicas", "0"),
    ("rebalance.commit_interval_s", "2"),
    ("failures.first_failure_time_s", "720"),
    ("failures.failure_period_s", "720"),
    ("failures.kills_per_failure", "2"),
    ("failures.num_failures", "3"),
    ("detector.warmup_end_s", "120"),
    ("detector.recovery_threshold", "0.15"),
    ("detector.stable_window_s", "160"),
    ("detector.failure_period_s", "720"),
    ("detector.detection_threshold", "0.15"),
    ("detector.detection_consecutive_samples", "3"),
    ("detector.moving_window", "10"),
    ("engine.tick_s", "0.1"),
    ("engine.state_cap_s", "60"),
    ("engine.contention_knee", "0.8"),
    ("engine.fetch_buffer_records", "20"),
];

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid scenario: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("unknown builtin scenario `{0}` (expected `default` or `tuned`)")]
    UnknownBuiltin(String),
    #[error("unknown scenario key `{0}`")]
    UnknownKey(String),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

/// One violated invariant. `key` names the offending field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub key: &'static str,
    pub message: &'static str,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Builtin {
    Default,
    Tuned,
}

impl Builtin {
    pub fn parse(name: &str) -> Result<Self, ScenarioError> {
        match name {
            "default" => Ok(Builtin::Default),
            "tuned" => Ok(Builtin::Tuned),
            other => Err(ScenarioError::UnknownBuiltin(other.to_string())),
        }
    }

    /// Minimal document describing the builtin: only keys differing from the
    /// defaults are listed, so overrides appended to it behave like edits to
    /// a scenario file.
    pub fn document(self) -> &'static str {
        match self {
            Builtin::Default => "scenario.name = default\n",
            Builtin::Tuned => {
                "scenario.name = tuned\n\
                 rebalance.probing_interval_s = 60\n\
                 rebalance.max_warmup_replicas = 8\n"
            }
        }
    }
}

pub fn builtin_scenario(name: &str) -> Result<ScenarioConfig, ScenarioError> {
    load_scenario(Builtin::parse(name)?.document())
}

/// Parses and validates a scenario document.
pub fn load_scenario(text: &str) -> Result<ScenarioConfig, ScenarioError> {
    let config = parse_scenario(text)?;
    validate(&config).map_err(ScenarioError::Invalid)?;
    Ok(config)
}

/// Parses without validating. Later occurrences of a key are rejected.
pub fn parse_scenario(text: &str) -> Result<ScenarioConfig, ScenarioError> {
    let mut config = ScenarioConfig::default();
    let mut seen = BTreeSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| ScenarioError::Parse {
            line,
            message: format!("expected `section.key = value`, found `{content}`"),
        })?;
        let key = key.trim();
        let value = value.trim();
        if !seen.insert(key.to_string()) {
            return Err(ScenarioError::Parse {
                line,
                message: format!("duplicate key `{key}`"),
            });
        }
        config
            .set(key, value)
            .map_err(|message| ScenarioError::Parse { line, message })?;
    }
    if !seen.contains("workload.input_rate") {
        config.workload.input_rate = default_input_rate(&config.cluster);
    }
    Ok(config)
}

fn parse_f64(key: &str, value: &str) -> Result<f64, String> {
    let v: f64 = value
        .parse()
        .map_err(|_| format!("`{key}` expects a number, found `{value}`"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{key}` must be finite"))
    }
}

fn parse_usize(key: &str, value: &str) -> Result<usize, String> {
    value
        .parse()
        .map_err(|_| format!("`{key}` expects a non-negative integer, found `{value}`"))
}

impl ScenarioConfig {
    /// Sets a single field by its document key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let f = |v| parse_f64(key, v);
        let u = |v| parse_usize(key, v);
        match key {
            "scenario.name" => {
                if value.is_empty() || value.contains(char::is_whitespace) {
                    return Err("`scenario.name` must be a single non-empty word".into());
                }
                self.name = value.to_string();
            }
            "scenario.run_duration_s" => self.run_duration = f(value)?,
            "scenario.seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| format!("`{key}` expects an unsigned integer"))?
            }
            "workload.input_rate" => self.workload.input_rate = f(value)?,
            "workload.num_partitions" => self.workload.num_partitions = u(value)?,
            "workload.selectivity" => self.workload.selectivity = f(value)?,
            "workload.num_consumers" => self.workload.num_consumers = u(value)?,
            "workload.base_processing_latency_s" => {
                self.workload.base_processing_latency = f(value)?
            }
            "cluster.num_workers" => self.cluster.num_workers = u(value)?,
            "cluster.worker_capacity" => self.cluster.worker_capacity = f(value)?,
            "cluster.replay_rate" => self.cluster.replay_rate = f(value)?,
            "cluster.replacement_delay_min_s" => self.cluster.replacement_delay_min = f(value)?,
            "cluster.replacement_delay_max_s" => self.cluster.replacement_delay_max = f(value)?,
            "rebalance.probing_interval_s" => self.rebalance.probing_interval = f(value)?,
            "rebalance.max_warmup_replicas" => self.rebalance.max_warmup_replicas = u(value)?,
            "rebalance.acceptable_recovery_lag" => {
                self.rebalance.acceptable_recovery_lag = f(value)?
            }
            "rebalance.num_standby_replicas" => self.rebalance.num_standby_replicas = u(value)?,
            "rebalance.commit_interval_s" => self.rebalance.commit_interval = f(value)?,
            "failures.first_failure_time_s" => self.failures.first_failure_time = f(value)?,
            "failures.failure_period_s" => self.failures.failure_period = f(value)?,
            "failures.kills_per_failure" => self.failures.kills_per_failure = u(value)?,
            "failures.num_failures" => self.failures.num_failures = u(value)?,
            "detector.warmup_end_s" => self.detector.warmup_end = f(value)?,
            "detector.recovery_threshold" => self.detector.recovery_threshold = f(value)?,
            "detector.stable_window_s" => self.detector.stable_window = f(value)?,
            "detector.failure_period_s" => self.detector.failure_period = f(value)?,
            "detector.detection_threshold" => self.detector.detection_threshold = f(value)?,
            "detector.detection_consecutive_samples" => {
                self.detector.detection_consecutive_samples = u(value)?
            }
            "detector.moving_window" => self.detector.moving_window = u(value)?,
            "engine.tick_s" => self.engine.tick = f(value)?,
            "engine.state_cap_s" => self.engine.state_cap = f(value)?,
            "engine.contention_knee" => self.engine.contention_knee = f(value)?,
            "engine.fetch_buffer_records" => self.engine.fetch_buffer_records = f(value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Current value of a field, formatted so that [`ScenarioConfig::set`]
    /// restores it exactly.
    pub fn get(&self, key: &str) -> Option<String> {
        let s = match key {
            "scenario.name" => self.name.clone(),
            "scenario.run_duration_s" => self.run_duration.to_string(),
            "scenario.seed" => self.seed.to_string(),
            "workload.input_rate" => self.workload.input_rate.to_string(),
            "workload.num_partitions" => self.workload.num_partitions.to_string(),
            "workload.selectivity" => self.workload.selectivity.to_string(),
            "workload.num_consumers" => self.workload.num_consumers.to_string(),
            "workload.base_processing_latency_s" => {
                self.workload.base_processing_latency.to_string()
            }
            "cluster.num_workers" => self.cluster.num_workers.to_string(),
            "cluster.worker_capacity" => self.cluster.worker_capacity.to_string(),
            "cluster.replay_rate" => self.cluster.replay_rate.to_string(),
            "cluster.replacement_delay_min_s" => self.cluster.replacement_delay_min.to_string(),
            "cluster.replacement_delay_max_s" => self.cluster.replacement_delay_max.to_string(),
            "rebalance.probing_interval_s" => self.rebalance.probing_interval.to_string(),
            "rebalance.max_warmup_replicas" => self.rebalance.max_warmup_replicas.to_string(),
            "rebalance.acceptable_recovery_lag" => {
                self.rebalance.acceptable_recovery_lag.to_string()
            }
            "rebalance.num_standby_replicas" => self.rebalance.num_standby_replicas.to_string(),
            "rebalance.commit_interval_s" => self.rebalance.commit_interval.to_string(),
            "failures.first_failure_time_s" => self.failures.first_failure_time.to_string(),
            "failures.failure_period_s" => self.failures.failure_period.to_string(),
            "failures.kills_per_failure" => self.failures.kills_per_failure.to_string(),
            "failures.num_failures" => self.failures.num_failures.to_string(),
            "detector.warmup_end_s" => self.detector.warmup_end.to_string(),
            "detector.recovery_threshold" => self.detector.recovery_threshold.to_string(),
            "detector.stable_window_s" => self.detector.stable_window.to_string(),
            "detector.failure_period_s" => self.detector.failure_period.to_string(),
            "detector.detection_threshold" => self.detector.detection_threshold.to_string(),
            "detector.detection_consecutive_samples" => {
                self.detector.detection_consecutive_samples.to_string()
            }
            "detector.moving_window" => self.detector.moving_window.to_string(),
            "engine.tick_s" => self.engine.tick.to_string(),
            "engine.state_cap_s" => self.engine.state_cap.to_string(),
            "engine.contention_knee" => self.engine.contention_knee.to_string(),
            "engine.fetch_buffer_records" => self.engine.fetch_buffer_records.to_string(),
            _ => return None,
        };
        Some(s)
    }

    /// Full document with every key set explicitly.
    pub fn to_document(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, _) in KEYS {
            let (sec, _) = key.split_once('.').expect("keys are dotted");
            if sec != section {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("# {sec}\n"));
                section = sec;
            }
            let value = self.get(key).expect("every listed key is gettable");
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    /// Number of simulation ticks in the run.
    pub fn total_ticks(&self) -> u64 {
        seconds_to_ticks(self.run_duration, self.engine.tick)
    }
}

/// Rewrites `text` so each `(key, value)` override takes effect: an existing
/// line for the key is replaced, otherwise the pair is appended.
pub fn apply_overrides(text: &str, overrides: &[(String, String)]) -> Result<String, ScenarioError> {
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    for (key, value) in overrides {
        if !is_known_key(key) {
            return Err(ScenarioError::UnknownKey(key.clone()));
        }
        let existing = lines.iter().position(|l| {
            let content = l.split('#').next().unwrap_or("");
            content.split_once('=').is_some_and(|(k, _)| k.trim() == key)
        });
        let line = format!("{key} = {value}");
        match existing {
            Some(i) => lines[i] = line,
            None => lines.push(line),
        }
    }
    let mut out = lines.join("\n");
    out.push('\n');
    Ok(out)
}

pub fn is_known_key(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

pub(crate) fn seconds_to_ticks(seconds: f64, tick: f64) -> u64 {
    (seconds / tick).round().max(0.0) as u64
}

/// Checks every invariant and returns all violations, not just the first.
pub fn validate(config: &ScenarioConfig) -> Result<(), Vec<Violation>> {
    let mut v = Vec::new();
    let mut check = |ok: bool, key: &'static str, message: &'static str| {
        if !ok {
            v.push(Violation { key, message });
        }
    };
    let w = &config.workload;
    check(w.input_rate > 0.0, "workload.input_rate", "input rate must be positive");
    check(w.num_partitions >= 1, "workload.num_partitions", "at least one partition required");
    check(
        (0.0..=1.0).contains(&w.selectivity),
        "workload.selectivity",
        "selectivity out of range",
    );
    check(
        w.base_processing_latency >= 0.0,
        "workload.base_processing_latency_s",
        "base latency must be non-negative",
    );

    let c = &config.cluster;
    check(c.num_workers >= 1, "cluster.num_workers", "at least one worker required");
    check(c.worker_capacity > 0.0, "cluster.worker_capacity", "capacity must be positive");
    check(c.replay_rate > 0.0, "cluster.replay_rate", "replay rate must be positive");
    check(
        c.replacement_delay_min > 0.0,
        "cluster.replacement_delay_min_s",
        "replacement delay must be positive",
    );
    check(
        c.replacement_delay_min <= c.replacement_delay_max,
        "cluster.replacement_delay_max_s",
        "replacement delay range inverted",
    );

    let r = &config.rebalance;
    check(
        r.probing_interval > 0.0,
        "rebalance.probing_interval_s",
        "probing interval must be positive",
    );
    check(
        r.max_warmup_replicas >= 1,
        "rebalance.max_warmup_replicas",
        "at least one warm-up replica required",
    );
    check(
        r.acceptable_recovery_lag >= 0.0,
        "rebalance.acceptable_recovery_lag",
        "acceptable recovery lag must be non-negative",
    );
    check(
        r.commit_interval > 0.0,
        "rebalance.commit_interval_s",
        "commit interval must be positive",
    );

    let f = &config.failures;
    check(
        f.kills_per_failure < c.num_workers,
        "failures.kills_per_failure",
        "kills per failure must leave at least one worker alive",
    );
    check(f.failure_period > 0.0, "failures.failure_period_s", "failure period must be positive");

    let d = &config.detector;
    check(
        d.recovery_threshold > 0.0 && d.recovery_threshold < 1.0,
        "detector.recovery_threshold",
        "recovery threshold must lie in (0, 1)",
    );
    check(d.stable_window > 0.0, "detector.stable_window_s", "stable window must be positive");
    check(d.failure_period > 0.0, "detector.failure_period_s", "failure period must be positive");
    check(
        d.detection_threshold > 0.0,
        "detector.detection_threshold",
        "detection threshold must be positive",
    );
    check(
        d.detection_consecutive_samples >= 1,
        "detector.detection_consecutive_samples",
        "at least one consecutive sample required",
    );
    check(d.moving_window >= 1, "detector.moving_window", "moving window must be at least 1");
    check(
        f.first_failure_time > d.warmup_end,
        "failures.first_failure_time_s",
        "reference window empty",
    );

    let e = &config.engine;
    check(e.tick > 0.0 && e.tick <= 1.0, "engine.tick_s", "tick must lie in (0, 1] seconds");
    check(e.state_cap >= 0.0, "engine.state_cap_s", "state cap must be non-negative");
    check(
        e.contention_knee > 0.0 && e.contention_knee < 1.0,
        "engine.contention_knee",
        "contention knee must lie in (0, 1)",
    );
    check(
        e.fetch_buffer_records >= 0.0,
        "engine.fetch_buffer_records",
        "fetch buffer must be non-negative",
    );

    check(
        f.num_failures == 0
            || config.run_duration >= f.first_failure_time + f.num_failures as f64 * f.failure_period,
        "scenario.run_duration_s",
        "run too short for the failure plan",
    );

    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn violation_messages(cfg: &ScenarioConfig) -> Vec<&'static str> {
        validate(cfg).err().unwrap_or_default().iter().map(|v| v.message).collect()
    }

    #[test]
    fn empty_document_is_the_default_builtin() {
        let empty = load_scenario("").unwrap();
        assert_eq!(empty, builtin_scenario("default").unwrap());
        assert_eq!(empty, ScenarioConfig::default());
    }

    #[test]
    fn probing_interval_is_read_in_seconds() {
        let cfg = load_scenario("rebalance.probing_interval_s = 600\n").unwrap();
        assert_eq!(cfg.rebalance.probing_interval, 600.0);
    }

    #[test]
    fn killing_every_worker_is_rejected() {
        let err = load_scenario("failures.kills_per_failure = 8\ncluster.num_workers = 8\n")
            .unwrap_err();
        match err {
            ScenarioError::Invalid(v) => assert!(v.iter().any(|v| v.key == "failures.kills_per_failure")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_errors_carry_the_line() {
        let err = load_scenario("# header\nworkload.selectivity = 0.5\nnonsense\n").unwrap_err();
        assert!(matches!(err, ScenarioError::Parse { line: 3, .. }));
        let err = load_scenario("workload.bogus = 1\n").unwrap_err();
        assert!(matches!(err, ScenarioError::Parse { line: 1, .. }));
        let err = load_scenario("workload.selectivity = half\n").unwrap_err();
        assert!(matches!(err, ScenarioError::Parse { line: 1, .. }));
        let err = load_scenario("scenario.seed = 1\nscenario.seed = 2\n").unwrap_err();
        assert!(matches!(err, ScenarioError::Parse { line: 2, .. }));
    }

    #[test]
    fn builtins_match_their_rebalance_regimes() {
        let d = builtin_scenario("default").unwrap();
        assert_eq!(d.rebalance.probing_interval, 600.0);
        assert_eq!(d.rebalance.max_warmup_replicas, 2);
        assert_eq!(d.rebalance.num_standby_replicas, 0);

        let t = builtin_scenario("tuned").unwrap();
        assert_eq!(t.rebalance.probing_interval, 60.0);
        assert_eq!(t.rebalance.max_warmup_replicas, 8);
        assert_eq!(t.rebalance.num_standby_replicas, 0);

        for cfg in [&d, &t] {
            assert_eq!(cfg.workload.num_partitions, 40);
            assert_eq!(cfg.workload.selectivity, 0.5);
            assert_eq!(cfg.rebalance.commit_interval, 2.0);
            assert_eq!(cfg.cluster.num_workers, 8);
            assert_eq!(cfg.failures.failure_period, 720.0);
            assert!(validate(cfg).is_ok());
        }
        assert!(matches!(builtin_scenario("eager"), Err(ScenarioError::UnknownBuiltin(_))));
    }

    #[test]
    fn validate_reports_every_violation() {
        let mut cfg = ScenarioConfig::default();
        cfg.failures.first_failure_time = 100.0;
        cfg.detector.warmup_end = 120.0;
        cfg.workload.selectivity = 1.5;
        let msgs = violation_messages(&cfg);
        assert!(msgs.contains(&"reference window empty"));
        assert!(msgs.contains(&"selectivity out of range"));
        assert_eq!(msgs.len(), 2);
    }

    #[test]
    fn run_duration_must_cover_failures() {
        let mut cfg = ScenarioConfig::default();
        cfg.run_duration = 2_000.0;
        assert_eq!(violation_messages(&cfg), vec!["run too short for the failure plan"]);
    }

    #[test]
    fn documented_defaults_equal_constructed_values() {
        let cfg = ScenarioConfig::default();
        for (key, documented) in KEYS {
            let actual = cfg.get(key).unwrap();
            if *key == "workload.input_rate" {
                let expected = 0.65 * 8.0 * 10_000.0;
                assert_eq!(actual.parse::<f64>().unwrap(), expected);
                continue;
            }
            match (documented.parse::<f64>(), actual.parse::<f64>()) {
                (Ok(a), Ok(b)) => assert_eq!(a, b, "{key}"),
                _ => assert_eq!(*documented, actual, "{key}"),
            }
        }
    }

    #[test]
    fn input_rate_default_follows_cluster_size() {
        let cfg = load_scenario("cluster.num_workers = 4\ncluster.worker_capacity = 1000\nfailures.kills_per_failure = 1\n").unwrap();
        assert_eq!(cfg.workload.input_rate, 0.65 * 4.0 * 1000.0);
        let cfg = load_scenario("workload.input_rate = 123.5\n").unwrap();
        assert_eq!(cfg.workload.input_rate, 123.5);
    }

    #[test]
    fn trailing_comments_are_ignored() {
        let cfg = load_scenario("rebalance.max_warmup_replicas = 4 # more\n").unwrap();
        assert_eq!(cfg.rebalance.max_warmup_replicas, 4);
    }

    #[test]
    fn expected_output_rate_is_selectivity_times_input() {
        let cfg = ScenarioConfig::default();
        assert_eq!(cfg.workload.expected_output_rate(), 0.5 * 52_000.0);
    }

    #[test]
    fn overrides_replace_or_append() {
        let doc = Builtin::Tuned.document();
        let ov = vec![
            ("rebalance.max_warmup_replicas".to_string(), "2".to_string()),
            ("failures.kills_per_failure".to_string(), "4".to_string()),
        ];
        let cfg = load_scenario(&apply_overrides(doc, &ov).unwrap()).unwrap();
        assert_eq!(cfg.rebalance.max_warmup_replicas, 2);
        assert_eq!(cfg.rebalance.probing_interval, 60.0);
        assert_eq!(cfg.failures.kills_per_failure, 4);
        let bad = vec![("nope.key".to_string(), "1".to_string())];
        assert_eq!(apply_overrides(doc, &bad), Err(ScenarioError::UnknownKey("nope.key".into())));
    }
}
