//! Acceptance suite. Each criterion prints one PASS or FAIL line; the process
//! exits non-zero if any criterion fails.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use streamsim::cli::execute_run;
use streamsim::detector::{build_report, detect_failures, train_reference, Verdict, DEFAULT_METRICS};
use streamsim::engine::{run, RunArtifacts};
use streamsim::metrics::{
    convergence_rounds, events_log, metric_table, moving_average, parse_event_log, run_median, weighted_percentile,
    MetricSeries,
};
use streamsim::scenario::{builtin_scenario, DetectorConfig, ScenarioConfig};

const SEEDS: u64 = 5;

struct Check {
    ok: bool,
    detail: String,
}

impl Check {
    fn new(ok: bool, detail: impl Into<String>) -> Self {
        Self { ok, detail: detail.into() }
    }
}

fn scenario(name: &str, kills: usize) -> ScenarioConfig {
    let mut cfg = builtin_scenario(name).expect("builtin scenarios are valid");
    cfg.failures.kills_per_failure = kills;
    cfg
}

/// Runs every (config, seed) pair on its own thread, preserving order.
fn run_all(jobs: &[(ScenarioConfig, u64)]) -> Vec<RunArtifacts> {
    std::thread::scope(|s| {
        let handles: Vec<_> = jobs.iter().map(|(cfg, seed)| s.spawn(move || run(cfg, *seed).unwrap())).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    })
}

fn latency_verdicts(a: &RunArtifacts) -> Vec<Verdict> {
    let truth: Vec<f64> = a.failures.iter().map(|f| f.time).collect();
    let report = build_report(&metric_table(a), DEFAULT_METRICS, &a.config.detector, Some(&truth)).unwrap();
    report.verdicts_for("lat_p90_ms").collect()
}

fn median_p90(a: &RunArtifacts) -> f64 {
    let table = metric_table(a);
    let p90 = table.iter().find(|s| s.name == "lat_p90_ms").unwrap();
    run_median(p90, a.config.failures.first_failure_time).unwrap()
}

fn lower_median(mut v: Vec<f64>) -> Option<f64> {
    v.sort_by(f64::total_cmp);
    v.get(v.len().checked_sub(1)? / 2).copied()
}

struct Trace {
    series: MetricSeries,
    injections: Vec<f64>,
    durations: Vec<f64>,
}

/// A step-shaped trace around a flat reference: each failure holds the
/// metric at a shifted level for a known time, then returns to the reference.
fn synthetic_trace(rng: &mut ChaCha8Rng, cfg: &DetectorConfig) -> Trace {
    let mean = rng.gen_range(50.0..5_000.0);
    let first = rng.gen_range(500.0..700.0f64).round();
    let injections: Vec<f64> = (0..3).map(|k| first + k as f64 * cfg.failure_period).collect();
    // ends before the next periodic slot so exactly three failures exist
    let span = first + 3.0 * cfg.failure_period - 1.0;
    let mut levels = Vec::new();
    let durations: Vec<f64> = injections
        .iter()
        .map(|_| {
            let factor =
                if rng.gen_bool(0.5) { rng.gen_range(0.3..0.75) } else { rng.gen_range(1.3..3.0) };
            levels.push(factor);
            rng.gen_range(30.0..450.0f64).round()
        })
        .collect();
    let values: Vec<f64> = (1..=span as usize)
        .map(|t| {
            let t = t as f64;
            let mut level = 1.0;
            for ((inj, d), f) in injections.iter().zip(&durations).zip(&levels) {
                if t >= *inj && t < inj + d {
                    level = *f;
                }
            }
            mean * level * (1.0 + rng.gen_range(-0.03..=0.03))
        })
        .collect();
    Trace { series: MetricSeries::regular("m", 1.0, 1.0, &values), injections, durations }
}

fn criterion_detector() -> Check {
    let cfg = DetectorConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let start = Instant::now();
    let tol_detect = cfg.moving_window as f64 + 5.0;
    let mut worst_detect: f64 = 0.0;
    let mut worst_duration: f64 = 0.0;
    let mut problems = Vec::new();
    for i in 0..30 {
        let trace = synthetic_trace(&mut rng, &cfg);
        let reference = match train_reference(&trace.series, &cfg, None) {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("trace {i}: {e}"));
                continue;
            }
        };
        let stable: Vec<f64> =
            trace.series.samples.iter().filter(|s| s.t < trace.injections[0]).map(|s| s.value).collect();
        let prefix = MetricSeries::regular("m", 1.0, 1.0, &stable);
        if !detect_failures(&prefix, &reference, &cfg).is_empty() {
            problems.push(format!("trace {i}: false positive before the first failure"));
        }
        let detected = detect_failures(&trace.series, &reference, &cfg);
        if detected.len() != trace.injections.len() {
            problems.push(format!("trace {i}: {} failures detected, {} injected", detected.len(), trace.injections.len()));
            continue;
        }
        for (k, (got, want)) in detected.iter().zip(&trace.injections).enumerate() {
            worst_detect = worst_detect.max((got - want).abs());
            let verdict = streamsim::detector::detect_recovery(&trace.series, &reference, *got, &cfg);
            match verdict.duration() {
                Some(d) => worst_duration = worst_duration.max((d - trace.durations[k]).abs()),
                None => problems.push(format!("trace {i} failure {k}: unrecovered")),
            }
        }
    }
    let elapsed = start.elapsed();
    let ok = problems.is_empty() && worst_detect <= tol_detect && worst_duration <= 10.0 && elapsed < Duration::from_secs(10);
    Check::new(
        ok,
        format!(
            "30 traces: worst detection error {worst_detect} s (tol {tol_detect}), worst duration error {worst_duration} s (tol 10), {} problems{}, {:.2?}",
            problems.len(),
            problems.first().map(|p| format!(" [{p}]")).unwrap_or_default(),
            elapsed
        ),
    )
}

fn criterion_latency_recovery(default_runs: &[RunArtifacts], tuned_runs: &[RunArtifacts], elapsed: Duration) -> Check {
    let default: Vec<Verdict> = default_runs.iter().flat_map(latency_verdicts).collect();
    let tuned: Vec<Verdict> = tuned_runs.iter().flat_map(latency_verdicts).collect();
    let unrecovered = default.iter().filter(|v| !v.is_recovered()).count() as f64 / default.len() as f64;
    let recovered = tuned.iter().filter(|v| v.is_recovered()).count() as f64 / tuned.len() as f64;
    let median = lower_median(tuned.iter().filter_map(|v| v.duration()).collect());
    let ok = default.len() == 15
        && tuned.len() == 15
        && unrecovered >= 0.8
        && recovered == 1.0
        && median.is_some_and(|m| (120.0..=600.0).contains(&m))
        && elapsed < Duration::from_secs(30);
    Check::new(
        ok,
        format!(
            "default unrecovered {:.0}% (need >= 80%), tuned recovered {:.0}% (need 100%), tuned median {} s (need 120..600), {:.2?}",
            unrecovered * 100.0,
            recovered * 100.0,
            median.map_or("-".into(), |m| m.to_string()),
            elapsed
        ),
    )
}

fn criterion_p90_contrast(pairs: &[(usize, Vec<RunArtifacts>, Vec<RunArtifacts>)]) -> Check {
    let mut ok = true;
    let mut parts = Vec::new();
    for (kills, default, tuned) in pairs {
        let contrasts: Vec<f64> = default.iter().zip(tuned).map(|(d, t)| 1.0 - median_p90(t) / median_p90(d)).collect();
        let inside = contrasts.iter().filter(|c| (0.30..=0.60).contains(*c)).count();
        ok &= inside * 2 > contrasts.len();
        let shown: Vec<String> = contrasts.iter().map(|c| format!("{:.1}", c * 100.0)).collect();
        parts.push(format!("kill-{kills}: {inside}/{} in band [{}]%", contrasts.len(), shown.join(", ")));
    }
    Check::new(ok, parts.join("; "))
}

fn criterion_convergence() -> Check {
    let mut jobs = Vec::new();
    for cap in [8usize, 2] {
        for seed in 0..SEEDS {
            let mut cfg = scenario("tuned", 2);
            cfg.rebalance.max_warmup_replicas = cap;
            jobs.push((cfg, seed));
        }
    }
    let runs = run_all(&jobs);
    let mut ok = true;
    let mut seen = Vec::new();
    for ((cfg, _), a) in jobs.iter().zip(&runs) {
        let events = parse_event_log(&events_log(a), Path::new("events.log")).unwrap();
        let rounds = convergence_rounds(&events);
        let cap = cfg.rebalance.max_warmup_replicas;
        let good = rounds.len() == 3
            && rounds.iter().all(|r| match cap {
                8 => r.is_some_and(|r| r <= 2),
                _ => *r == Some(5),
            });
        ok &= good;
        seen.push(format!("cap {cap}: {rounds:?}"));
    }
    seen.dedup();
    Check::new(ok, format!("rounds per failure (need <= 2 at cap 8, exactly 5 at cap 2): {}", seen.join("; ")))
}

fn criterion_throughput_identity() -> Check {
    let mut cfg = scenario("default", 2);
    cfg.failures.num_failures = 0;
    cfg.run_duration = 1_200.0;
    let a = run(&cfg, 1).unwrap();
    let table = metric_table(&a);
    let (input, output) = (&table[0], &table[1]);
    let warm = cfg.detector.warmup_end;
    let ratios: Vec<f64> = input
        .samples
        .iter()
        .zip(&output.samples)
        .filter(|(i, _)| i.t >= warm)
        .map(|(i, o)| o.value / i.value)
        .collect();
    let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ok = !ratios.is_empty() && (lo - 0.5).abs() <= 0.02 && (hi - 0.5).abs() <= 0.02;
    Check::new(ok, format!("output/input after warm-up within [{lo:.4}, {hi:.4}] (need 0.50 +- 0.02)"))
}

fn criterion_conservation() -> Check {
    let mut cfg = ScenarioConfig::default();
    cfg.name = "small".into();
    cfg.cluster.num_workers = 4;
    cfg.workload.num_partitions = 8;
    cfg.workload.input_rate = 0.65 * 4.0 * cfg.cluster.worker_capacity;
    cfg.failures.num_failures = 1;
    cfg.failures.kills_per_failure = 1;
    cfg.run_duration = 1_500.0;
    let a = run(&cfg, 3).unwrap();
    let per_task = cfg.workload.partition_rate();
    let bound = cfg.rebalance.commit_interval * per_task;
    let sel = cfg.workload.selectivity;
    let eps = 1e-6;
    let windows = &a.ledger.windows;
    let short: Vec<_> = windows.iter().filter(|w| w.emitted_outputs < w.expected_outputs - eps).collect();
    let unequal: Vec<_> = windows
        .iter()
        .filter(|w| !w.replayed && (w.emitted_outputs - w.expected_outputs).abs() > eps * w.expected_outputs.max(1.0))
        .collect();
    let replayed: Vec<_> = a.ledger.replayed_windows().collect();
    let worst_dup = replayed.iter().map(|w| w.emitted_outputs - w.expected_outputs).fold(0.0, f64::max);
    let worst_records = replayed.iter().map(|w| w.replayed_records).fold(0.0, f64::max);
    let ok = short.is_empty()
        && unequal.is_empty()
        && !replayed.is_empty()
        && worst_records <= bound + eps
        && worst_dup <= sel * bound + eps;
    Check::new(
        ok,
        format!(
            "{} windows, {} short, {} unequal unreplayed, {} replayed; worst duplicates {:.1} records (bound {:.1})",
            windows.len(),
            short.len(),
            unequal.len(),
            replayed.len(),
            worst_records,
            bound
        ),
    )
}

fn criterion_determinism() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = scenario("tuned", 2);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    execute_run(&cfg, 7, &a).unwrap();
    execute_run(&cfg, 7, &b).unwrap();
    let files = ["metrics.csv", "cpu.csv", "failures.csv", "recovery.csv", "events.log", "scenario.conf"];
    let differing: Vec<&str> =
        files.iter().copied().filter(|f| fs::read(a.join(f)).unwrap() != fs::read(b.join(f)).unwrap()).collect();
    Check::new(
        differing.is_empty(),
        if differing.is_empty() { format!("{} artifacts byte-identical", files.len()) } else { format!("differ: {differing:?}") },
    )
}

fn brute_percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = (p * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

fn criterion_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10_000);
    let values: Vec<f64> = (0..10_000).map(|_| rng.gen_range(0.0..1e5)).collect();
    let mut mismatches = 0;
    for window in [5usize, 10] {
        let ma = moving_average(&values, window);
        for i in 0..values.len() {
            let lo = (i + 1).saturating_sub(window);
            let mut sum = 0.0;
            for v in &values[lo..=i] {
                sum += v;
            }
            if ma[i] != sum / (i + 1 - lo) as f64 {
                mismatches += 1;
            }
        }
    }
    let unit: Vec<(f64, f64)> = values.iter().map(|v| (*v, 1.0)).collect();
    for p in [0.5, 0.9, 0.99] {
        if weighted_percentile(&unit, p) != Some(brute_percentile(&values, p)) {
            mismatches += 1;
        }
    }
    // integer weights: expand into repeated samples
    let weights: Vec<u32> = (0..values.len()).map(|_| rng.gen_range(1..4)).collect();
    let weighted: Vec<(f64, f64)> = values.iter().zip(&weights).map(|(v, w)| (*v, *w as f64)).collect();
    let expanded: Vec<f64> = values.iter().zip(&weights).flat_map(|(v, w)| std::iter::repeat_n(*v, *w as usize)).collect();
    for p in [0.5, 0.9, 0.99] {
        if weighted_percentile(&weighted, p) != Some(brute_percentile(&expanded, p)) {
            mismatches += 1;
        }
    }
    Check::new(mismatches == 0, format!("10000 samples, {mismatches} mismatches against brute force"))
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Check)> = Vec::new();

    results.push(("1 detector ground truth", criterion_detector()));

    let start = Instant::now();
    let kill2: Vec<(ScenarioConfig, u64)> = ["default", "tuned"]
        .iter()
        .flat_map(|name| (0..SEEDS).map(move |s| (scenario(name, 2), s)))
        .collect();
    let runs = run_all(&kill2);
    let (default2, tuned2) = runs.split_at(SEEDS as usize);
    let c2 = criterion_latency_recovery(default2, tuned2, start.elapsed());
    results.push(("2 default vs tuned latency recovery", c2));

    let mut pairs = Vec::new();
    for kills in [1usize, 2, 4] {
        if kills == 2 {
            pairs.push((kills, default2.to_vec(), tuned2.to_vec()));
            continue;
        }
        let jobs: Vec<(ScenarioConfig, u64)> = ["default", "tuned"]
            .iter()
            .flat_map(|name| (0..SEEDS).map(move |s| (scenario(name, kills), s)))
            .collect();
        let mut r = run_all(&jobs);
        let tuned = r.split_off(SEEDS as usize);
        pairs.push((kills, r, tuned));
    }
    results.push(("3 median p90 contrast", criterion_p90_contrast(&pairs)));
    results.push(("4 convergence rounds", criterion_convergence()));
    results.push(("5 throughput identity", criterion_throughput_identity()));
    results.push(("6 at-least-once conservation", criterion_conservation()));
    results.push(("7 determinism", criterion_determinism()));
    results.push(("8 smoothing and percentile oracles", criterion_oracles()));

    let mut failed = 0;
    for (name, check) in &results {
        println!("{} criterion {name}: {}", if check.ok { "PASS" } else { "FAIL" }, check.detail);
        failed += usize::from(!check.ok);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
