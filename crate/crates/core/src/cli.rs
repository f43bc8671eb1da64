//! The `streamsim` command line: `run`, `detect`, `report` and `sweep`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::detector::{
    build_report, build_report_from_files, read_recovery_csv, RecoveryReport, DEFAULT_METRICS,
};
use crate::engine::{run, EngineError, RunArtifacts};
use crate::metrics::{
    convergence_rounds, export_csv, format_sig6, metric_table, read_metrics_csv, run_median, weighted_percentile,
    write_atomic,
};
use crate::scenario::{apply_overrides, is_known_key, load_scenario, Builtin, ScenarioConfig, ScenarioError, KEYS};

pub const SCENARIO_FILE: &str = "scenario.conf";
pub const RECOVERY_FILE: &str = "recovery.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const OUT_ROOT_ENV: &str = "STREAMSIM_OUT";

const LATENCY_METRIC: &str = "lat_p90_ms";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::UnknownBuiltin(_) | ScenarioError::UnknownKey(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn data<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

fn schema_help() -> String {
    let mut s = String::from(
        "Scenario files hold one `section.key = value` per line; `#` starts a comment.\n\
         Unlisted keys take their defaults. A builtin name (`default`, `tuned`) may be\n\
         used wherever a scenario path is expected.\n\nKeys and defaults:\n",
    );
    let width = KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    for (k, v) in KEYS {
        let _ = writeln!(s, "  {k:<width$}  {v}");
    }
    let _ = write!(s, "\nWithout --out, runs are written under ${OUT_ROOT_ENV} (or ./runs).");
    s
}

#[derive(Debug, Parser)]
#[command(name = "streamsim", version, about = "Fault-recovery simulator for partitioned stream processing")]
#[command(after_long_help = schema_help())]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one scenario and export its artifacts.
    Run(RunArgs),
    /// Detect failures and recoveries in a metrics.csv trace.
    Detect(DetectArgs),
    /// Compare run directories.
    Report(ReportArgs),
    /// Run a scenario over a list of values for one key.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Builtin name or scenario file.
    #[arg(long, default_value = "default")]
    pub scenario: String,
    /// Overrides `scenario.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory; defaults to <out-root>/<name>-seed<seed>.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Root for default output directories; ./runs when unset.
    #[arg(long, env = OUT_ROOT_ENV, hide_env_values = true)]
    pub out_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Metric column, repeatable; the first one drives failure detection.
    #[arg(long = "metric")]
    pub metrics: Vec<String>,
    /// Sets both the detection and the recovery threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub stable_window: Option<f64>,
    #[arg(long)]
    pub failure_period: Option<f64>,
    #[arg(long)]
    pub warmup_end: Option<f64>,
    /// failures.csv whose injection times are used verbatim.
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    /// Defaults to recovery.csv next to the input.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Defaults to report.csv in the current directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, default_value = "default")]
    pub base: String,
    #[arg(long)]
    pub param: String,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    /// Sweep directory; defaults to <out-root>/sweep-<param>.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Parallel runs; defaults to the available cores.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Root for default output directories; ./runs when unset.
    #[arg(long, env = OUT_ROOT_ENV, hide_env_values = true)]
    pub out_root: Option<PathBuf>,
}

/// Parses `args` and dispatches. Usage errors exit 1, data errors 2.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(&a).map(|_| ()),
        Command::Detect(a) => cmd_detect(&a).map(|_| ()),
        Command::Report(a) => cmd_report(&a).map(|_| ()),
        Command::Sweep(a) => cmd_sweep(&a).map(|_| ()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn scenario_text(source: &str) -> Result<String, CliError> {
    match Builtin::parse(source) {
        Ok(b) => Ok(b.document().to_string()),
        Err(_) => {
            let path = Path::new(source);
            if !path.exists() {
                return Err(CliError::Usage(format!(
                    "`{source}` is neither a builtin scenario (default, tuned) nor a file"
                )));
            }
            fs::read_to_string(path).map_err(|e| CliError::Data(format!("{source}: {e}")))
        }
    }
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, CliError> {
    raw.iter()
        .map(|kv| {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, found `{kv}`")))?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

fn default_out(root: Option<&Path>, leaf: String) -> PathBuf {
    root.map_or_else(|| PathBuf::from("runs"), Path::to_path_buf).join(leaf)
}

/// A completed run held in memory alongside its directory.
pub struct RunOutcome {
    pub dir: PathBuf,
    pub config: ScenarioConfig,
    pub artifacts: RunArtifacts,
    pub recovery: RecoveryReport,
}

impl RunOutcome {
    pub fn median_p90(&self) -> Option<f64> {
        let table = metric_table(&self.artifacts);
        let p90 = table.iter().find(|s| s.name == LATENCY_METRIC)?;
        run_median(p90, self.config.failures.first_failure_time).ok()
    }
}

/// Simulates `config` with `seed` and writes every artifact into `dir`.
pub fn execute_run(config: &ScenarioConfig, seed: u64, dir: &Path) -> Result<RunOutcome, CliError> {
    let mut config = config.clone();
    config.seed = seed;
    let artifacts = run(&config, seed)?;
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    write_atomic(&dir.join(SCENARIO_FILE), &config.to_document()).map_err(data)?;
    export_csv(&artifacts, dir).map_err(data)?;
    let truth: Vec<f64> = artifacts.failures.iter().map(|f| f.time).collect();
    let recovery =
        build_report(&metric_table(&artifacts), DEFAULT_METRICS, &config.detector, Some(&truth)).map_err(data)?;
    write_atomic(&dir.join(RECOVERY_FILE), &recovery.to_csv()).map_err(data)?;
    Ok(RunOutcome { dir: dir.to_path_buf(), config, artifacts, recovery })
}

pub fn cmd_run(args: &RunArgs) -> Result<RunOutcome, CliError> {
    let text = apply_overrides(&scenario_text(&args.scenario)?, &parse_overrides(&args.overrides)?)?;
    let config = load_scenario(&text)?;
    let seed = args.seed.unwrap_or(config.seed);
    let dir = match &args.out {
        Some(d) => d.clone(),
        None => default_out(args.out_root.as_deref(), format!("{}-seed{seed}", config.name)),
    };
    let outcome = execute_run(&config, seed, &dir)?;
    println!("wrote {}", dir.display());
    print!("{}", outcome.recovery);
    Ok(outcome)
}

pub fn cmd_detect(args: &DetectArgs) -> Result<RecoveryReport, CliError> {
    let mut cfg = crate::scenario::DetectorConfig::default();
    if let Some(t) = args.threshold {
        cfg.detection_threshold = t;
        cfg.recovery_threshold = t;
    }
    if let Some(w) = args.stable_window {
        cfg.stable_window = w;
    }
    if let Some(p) = args.failure_period {
        cfg.failure_period = p;
    }
    if let Some(w) = args.warmup_end {
        cfg.warmup_end = w;
    }
    let metrics: Vec<&str> = if args.metrics.is_empty() {
        DEFAULT_METRICS.to_vec()
    } else {
        args.metrics.iter().map(String::as_str).collect()
    };
    let report = build_report_from_files(&args.input, args.ground_truth.as_deref(), &metrics, &cfg).map_err(data)?;
    let out = match &args.out {
        Some(p) => p.clone(),
        None => args.input.with_file_name(RECOVERY_FILE),
    };
    write_atomic(&out, &report.to_csv()).map_err(data)?;
    print!("{report}");
    Ok(report)
}

/// Nearest-rank quartiles (q1, median, q3).
fn quartiles(values: &[f64]) -> Option<(f64, f64, f64)> {
    let obs: Vec<(f64, f64)> = values.iter().map(|v| (*v, 1.0)).collect();
    Some((
        weighted_percentile(&obs, 0.25)?,
        weighted_percentile(&obs, 0.5)?,
        weighted_percentile(&obs, 0.75)?,
    ))
}

fn lower_median(values: &[f64]) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.get(v.len().checked_sub(1)? / 2).copied()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), format_sig6)
}

struct RunSummary {
    label: String,
    scenario: String,
    median_p90: f64,
    recovery: RecoveryReport,
}

fn summarize_dir(dir: &Path) -> Result<RunSummary, CliError> {
    let need = |name: &str| {
        let p = dir.join(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(CliError::Data(format!("{}: missing {name}", dir.display())))
        }
    };
    let scenario_path = need(SCENARIO_FILE)?;
    let metrics_path = need("metrics.csv")?;
    let recovery_path = need(RECOVERY_FILE)?;
    let text = fs::read_to_string(&scenario_path).map_err(|e| CliError::Data(format!("{}: {e}", scenario_path.display())))?;
    let config = load_scenario(&text).map_err(|e| CliError::Data(format!("{}: {e}", scenario_path.display())))?;
    let series = read_metrics_csv(&metrics_path).map_err(data)?;
    let p90 = series
        .iter()
        .find(|s| s.name == LATENCY_METRIC)
        .ok_or_else(|| CliError::Data(format!("{}: no {LATENCY_METRIC} column", metrics_path.display())))?;
    let median_p90 = run_median(p90, config.failures.first_failure_time)
        .map_err(|e| CliError::Data(format!("{}: {e}", metrics_path.display())))?;
    let recovery = read_recovery_csv(&recovery_path).map_err(data)?;
    let label = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
    Ok(RunSummary { label, scenario: config.name, median_p90, recovery })
}

/// `section,label,stat,value` rows.
pub type ReportRows = Vec<(String, String, String, String)>;

fn report_rows(runs: &[RunSummary]) -> ReportRows {
    let mut rows: ReportRows = Vec::new();
    let mut push = |section: &str, label: &str, stat: String, value: String| {
        rows.push((section.to_string(), label.to_string(), stat, value));
    };
    for r in runs {
        push("run", &r.label, "scenario".into(), r.scenario.clone());
        push("run", &r.label, "median_p90_ms".into(), format_sig6(r.median_p90));
        for m in &r.recovery.metrics {
            push("run", &r.label, format!("recovered_fraction_{m}"), fmt_opt(r.recovery.recovered_fraction(m)));
            push("run", &r.label, format!("median_recovery_s_{m}"), fmt_opt(r.recovery.median_duration(m)));
        }
    }

    let mut groups: Vec<(&str, Vec<&RunSummary>)> = Vec::new();
    for r in runs {
        match groups.iter_mut().find(|(name, _)| *name == r.scenario) {
            Some((_, members)) => members.push(r),
            None => groups.push((&r.scenario, vec![r])),
        }
    }
    let mut group_medians = Vec::new();
    for (name, members) in &groups {
        let p90s: Vec<f64> = members.iter().map(|r| r.median_p90).collect();
        push("group", name, "runs".into(), members.len().to_string());
        if let Some((q1, q2, q3)) = quartiles(&p90s) {
            push("group", name, "median_p90_ms_q1".into(), format_sig6(q1));
            push("group", name, "median_p90_ms_median".into(), format_sig6(q2));
            push("group", name, "median_p90_ms_q3".into(), format_sig6(q3));
        }
        let durations: Vec<f64> =
            members.iter().flat_map(|r| r.recovery.verdicts_for(LATENCY_METRIC).filter_map(|v| v.duration())).collect();
        let (q1, q2, q3) = quartiles(&durations).map_or((None, None, None), |(a, b, c)| (Some(a), Some(b), Some(c)));
        push("group", name, format!("recovery_s_{LATENCY_METRIC}_q1"), fmt_opt(q1));
        push("group", name, format!("recovery_s_{LATENCY_METRIC}_median"), fmt_opt(q2));
        push("group", name, format!("recovery_s_{LATENCY_METRIC}_q3"), fmt_opt(q3));
        group_medians.push((name.to_string(), lower_median(&p90s).unwrap_or(f64::NAN)));
    }

    // contrast scenarios when there are several, otherwise individual runs
    let subjects: Vec<(String, f64)> = if group_medians.len() > 1 {
        group_medians
    } else {
        runs.iter().map(|r| (r.label.clone(), r.median_p90)).collect()
    };
    for j in 1..subjects.len() {
        for i in 0..j {
            let (a, base) = (&subjects[j], &subjects[i]);
            let pct = if base.1 != 0.0 { Some((a.1 - base.1) / base.1 * 100.0) } else { None };
            push("contrast", &format!("{} vs {}", a.0, base.0), "median_p90_change_pct".into(), fmt_opt(pct));
        }
    }
    rows
}

fn rows_csv(rows: &ReportRows) -> String {
    let mut out = String::from("section,label,stat,value\n");
    for (s, l, k, v) in rows {
        let _ = writeln!(out, "{s},{l},{k},{v}");
    }
    out
}

fn rows_table(rows: &ReportRows) -> String {
    let w = |f: fn(&(String, String, String, String)) -> &String| rows.iter().map(|r| f(r).len()).max().unwrap_or(0);
    let (ws, wl, wk) = (w(|r| &r.0), w(|r| &r.1), w(|r| &r.2));
    let mut out = String::new();
    for (s, l, k, v) in rows {
        let _ = writeln!(out, "{s:<ws$}  {l:<wl$}  {k:<wk$}  {v}");
    }
    out
}

pub fn cmd_report(args: &ReportArgs) -> Result<ReportRows, CliError> {
    let runs: Vec<RunSummary> = args.runs.iter().map(|d| summarize_dir(d)).collect::<Result<_, _>>()?;
    let rows = report_rows(&runs);
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from(REPORT_FILE));
    write_atomic(&out, &rows_csv(&rows)).map_err(data)?;
    print!("{}", rows_table(&rows));
    Ok(rows)
}

/// One aggregate line of `sweep.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub runs: usize,
    pub median_latency_recovery_s: Option<f64>,
    pub median_p90_ms: Option<f64>,
    pub median_probe_rounds: Option<f64>,
}

fn sweep_row(value: &str, outcomes: &[RunOutcome]) -> SweepRow {
    let mut recovery = Vec::new();
    let mut p90s = Vec::new();
    let mut rounds = Vec::new();
    for o in outcomes {
        let cap = o.config.detector.failure_period;
        recovery.extend(o.recovery.verdicts_for(LATENCY_METRIC).map(|v| v.duration().unwrap_or(cap)));
        p90s.extend(o.median_p90());
        rounds.extend(convergence_rounds(&o.artifacts.events).into_iter().flatten().map(|r| r as f64));
    }
    SweepRow {
        value: value.to_string(),
        runs: outcomes.len(),
        median_latency_recovery_s: lower_median(&recovery),
        median_p90_ms: lower_median(&p90s),
        median_probe_rounds: lower_median(&rounds),
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("value,runs,median_latency_recovery_s,median_p90_ms,median_probe_rounds\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.value,
            r.runs,
            fmt_opt(r.median_latency_recovery_s),
            fmt_opt(r.median_p90_ms),
            fmt_opt(r.median_probe_rounds)
        );
    }
    out
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<Vec<SweepRow>, CliError> {
    if !is_known_key(&args.param) {
        return Err(CliError::Usage(format!("unknown scenario key `{}`", args.param)));
    }
    let base = scenario_text(&args.base)?;
    let mut configs = Vec::with_capacity(args.values.len());
    for v in &args.values {
        let text = apply_overrides(&base, &[(args.param.clone(), v.clone())])?;
        configs.push(load_scenario(&text)?);
    }
    let root = match &args.out {
        Some(d) => d.clone(),
        None => default_out(args.out_root.as_deref(), format!("sweep-{}", args.param)),
    };
    let jobs: Vec<(usize, u64, PathBuf)> = args
        .values
        .iter()
        .enumerate()
        .flat_map(|(i, v)| {
            let root = &root;
            let param = &args.param;
            args.seeds.iter().map(move |s| (i, *s, root.join(format!("{param}={v}")).join(format!("seed-{s}"))))
        })
        .collect();

    let threads = args
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .clamp(1, jobs.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunOutcome, CliError>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some((i, seed, dir)) = jobs.get(k) else { break };
                let outcome = execute_run(&configs[*i], *seed, dir);
                results.lock().expect("no worker panics while holding the lock")[k] = Some(outcome);
            });
        }
    });

    let mut outcomes: Vec<Vec<RunOutcome>> = (0..args.values.len()).map(|_| Vec::new()).collect();
    let results = results.into_inner().expect("all workers joined");
    for ((i, _, _), r) in jobs.iter().zip(results) {
        outcomes[*i].push(r.expect("every job ran")?);
    }
    let rows: Vec<SweepRow> = args.values.iter().zip(&outcomes).map(|(v, o)| sweep_row(v, o)).collect();
    fs::create_dir_all(&root).map_err(|e| CliError::Data(format!("{}: {e}", root.display())))?;
    let csv = sweep_csv(&rows);
    write_atomic(&root.join(SWEEP_FILE), &csv).map_err(data)?;
    print!("{csv}");
    Ok(rows)
}
