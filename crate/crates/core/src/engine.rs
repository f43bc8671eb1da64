//! Fluid-flow simulation of a partitioned stream-processing cluster.
//!
//! Queues and rates are continuous quantities integrated at a fixed tick.
//! Failures, replacement joins and probing rebalances are discrete events on
//! a priority queue ordered by (tick, sequence number), so equal-time events
//! always fire in scheduling order. A run is a pure function of its scenario
//! and seed.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::failure::{kill_workers, plan_failures, spawn_replacement, FailureEvent};
use crate::metrics::{window_percentiles, LatencyWindow, CPU_CADENCE_S, LATENCY_WINDOW_S};
use crate::rebalance::{
    imbalance, place_standbys, probing_rebalance, warmup_ready, Assignment, RebalanceError, TaskId, WorkerId,
};
use crate::scenario::{seconds_to_ticks, validate, ScenarioConfig, Violation};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid scenario: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidScenario(Vec<Violation>),
    #[error("scheduler bug: worker {0} killed while already dead")]
    KillDeadWorker(WorkerId),
    #[error(transparent)]
    Rebalance(#[from] RebalanceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskStatus {
    Active,
    Warming,
    Standby,
    Orphaned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskState {
    pub task_id: TaskId,
    pub owner: Option<WorkerId>,
    pub produced_offset: f64,
    /// Position of the owner's consumer.
    pub consumed_offset: f64,
    /// Furthest position ever consumed; anything below it is a replay.
    pub high_water: f64,
    pub last_commit_offset: f64,
    /// Changelog records the active owner must replay before serving.
    pub changelog_backlog: f64,
    /// Current state size in changelog records.
    pub state_size: f64,
    pub last_service_time: f64,
    window: OpenWindow,
}

impl TaskState {
    pub fn status(&self) -> TaskStatus {
        if self.owner.is_some() {
            TaskStatus::Active
        } else {
            TaskStatus::Orphaned
        }
    }

    /// Records produced but not yet consumed by the current owner.
    pub fn queue(&self) -> f64 {
        (self.produced_offset - self.consumed_offset).max(0.0)
    }

    pub fn lag(&self) -> f64 {
        self.produced_offset - self.last_commit_offset
    }

    pub fn is_restoring(&self) -> bool {
        self.changelog_backlog > 0.0
    }

    fn close_window(&mut self, now: f64) -> LedgerWindow {
        let next = OpenWindow::new(self.window.index + 1, now);
        let w = std::mem::replace(&mut self.window, next);
        LedgerWindow {
            task: self.task_id,
            index: w.index,
            start: w.start,
            end: now,
            expected_outputs: w.expected,
            emitted_outputs: w.emitted,
            replayed_records: w.replayed_records,
            replayed: w.replayed_records > 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerInstance {
    pub worker_id: WorkerId,
    /// Initial worker slot this incarnation replaces.
    pub slot: usize,
    pub alive: bool,
    pub capacity: f64,
    pub cpu_utilization: f64,
    cpu_accum: f64,
    cpu_ticks: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EventKind {
    Kill,
    Join,
    Rebalance,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventKind::Kill => "KILL",
            EventKind::Join => "JOIN",
            EventKind::Rebalance => "REBALANCE",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEvent {
    pub time: f64,
    pub kind: EventKind,
    pub details: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ScheduledEvent {
    Failure { index: usize },
    Join { slot: usize },
    Probe { generation: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Scheduled {
    tick: u64,
    seq: u64,
    event: ScheduledEvent,
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.tick, self.seq).cmp(&(other.tick, other.seq))
    }
}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Outputs accounted for one task between two commits.
#[derive(Debug, Clone, PartialEq)]
pub struct LedgerWindow {
    pub task: TaskId,
    pub index: u64,
    pub start: f64,
    pub end: f64,
    pub expected_outputs: f64,
    pub emitted_outputs: f64,
    /// Records processed a second time inside this window.
    pub replayed_records: f64,
    pub replayed: bool,
}

#[derive(Debug, Clone, PartialEq)]
struct OpenWindow {
    index: u64,
    start: f64,
    expected: f64,
    emitted: f64,
    replayed_records: f64,
}

impl OpenWindow {
    fn new(index: u64, start: f64) -> Self {
        Self { index, start, expected: 0.0, emitted: 0.0, replayed_records: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OutputLedger {
    pub windows: Vec<LedgerWindow>,
}

impl OutputLedger {
    pub fn total_emitted(&self) -> f64 {
        self.windows.iter().map(|w| w.emitted_outputs).sum()
    }

    pub fn total_expected(&self) -> f64 {
        self.windows.iter().map(|w| w.expected_outputs).sum()
    }

    pub fn replayed_windows(&self) -> impl Iterator<Item = &LedgerWindow> {
        self.windows.iter().filter(|w| w.replayed)
    }

    /// Windows breaking at-least-once accounting: fewer outputs than
    /// expected, or extra outputs without a replay.
    pub fn violations(&self) -> Vec<&LedgerWindow> {
        self.windows
            .iter()
            .filter(|w| {
                w.emitted_outputs < w.expected_outputs
                    || (!w.replayed && w.emitted_outputs != w.expected_outputs)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CpuSample {
    pub t: f64,
    pub worker: WorkerId,
    pub util: f64,
}

/// Unsmoothed samples; the metrics module derives exported series from them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawSamples {
    /// Records consumed during second `i + 1`.
    pub input_per_s: Vec<f64>,
    pub output_per_s: Vec<f64>,
    /// Lag at the end of second `i + 1`.
    pub lag_per_s: Vec<f64>,
    pub latency_windows: Vec<LatencyWindow>,
    pub cpu: Vec<CpuSample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FailureRecord {
    pub index: usize,
    pub time: f64,
    pub victims: Vec<WorkerId>,
    pub replacement_times: Vec<f64>,
    /// Changelog records attached to new owners that had no replica.
    pub state_restored: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub config: ScenarioConfig,
    pub seed: u64,
    pub raw: RawSamples,
    pub ledger: OutputLedger,
    pub events: Vec<LogEvent>,
    pub failures: Vec<FailureRecord>,
}

/// Ownership changes applied by one rebalance.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub(crate) struct AppliedChange {
    pub migrations: usize,
    pub restored_records: f64,
}

/// Sojourn latency of a served task: buffered records ahead of it at the
/// allocated service rate, plus the per-record processing latency inflated by
/// CPU contention up to `knee`.
pub fn compute_event_latency(queue: f64, service_rate: f64, base: f64, utilization: f64, knee: f64) -> f64 {
    let waiting = if service_rate > 0.0 { queue / service_rate } else { 0.0 };
    waiting + base * contention_factor(utilization, knee)
}

/// `1 / (1 - min(u, knee))`; exactly 1 on an idle worker.
pub fn contention_factor(utilization: f64, knee: f64) -> f64 {
    1.0 / (1.0 - utilization.clamp(0.0, knee))
}

/// Latency of a task that is not being served: the age of its oldest
/// waiting record plus the time to drain what is buffered.
pub fn unserved_latency(since_last_service: f64, queue: f64, nominal_rate: f64, base: f64) -> f64 {
    let drain = if nominal_rate > 0.0 { queue / nominal_rate } else { 0.0 };
    since_last_service.max(0.0) + drain + base
}

/// Max-min fair split of `budget` over `demands`.
pub fn water_fill(demands: &[f64], budget: f64) -> Vec<f64> {
    let mut alloc = vec![0.0; demands.len()];
    let mut order: Vec<usize> = (0..demands.len()).collect();
    order.sort_by(|a, b| demands[*a].total_cmp(&demands[*b]).then(a.cmp(b)));
    let mut remaining = budget.max(0.0);
    let mut left = demands.len();
    for i in order {
        let share = remaining / left as f64;
        let give = demands[i].max(0.0).min(share);
        alloc[i] = give;
        remaining -= give;
        left -= 1;
    }
    alloc
}

pub struct ClusterState {
    pub config: ScenarioConfig,
    pub tick: u64,
    pub workers: Vec<WorkerInstance>,
    pub tasks: Vec<TaskState>,
    pub assignment: Assignment,
    /// Changelog backlog of every warming or standby replica.
    pub replicas: BTreeMap<(TaskId, WorkerId), f64>,
    /// Current worker id for each initial slot.
    pub incarnation: Vec<WorkerId>,
    pub events: Vec<LogEvent>,
    pub failures: Vec<FailureRecord>,
    pending: BinaryHeap<Reverse<Scheduled>>,
    seq: u64,
    probe_generation: u64,
    plan: Vec<FailureEvent>,
    next_worker_id: u32,
    ledger: OutputLedger,
    raw: RawSamples,
    second_input: f64,
    second_output: f64,
    latency_obs: Vec<(f64, f64)>,
    #[allow(dead_code)]
    rng: ChaCha8Rng,
}

impl ClusterState {
    pub fn new(config: &ScenarioConfig, seed: u64) -> Result<Self, EngineError> {
        validate(config).map_err(EngineError::InvalidScenario)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = plan_failures(config, &mut rng);
        let n = config.cluster.num_workers;
        let ids: Vec<WorkerId> = (0..n as u32).map(WorkerId).collect();
        let workers = ids
            .iter()
            .enumerate()
            .map(|(slot, id)| WorkerInstance {
                worker_id: *id,
                slot,
                alive: true,
                capacity: config.cluster.worker_capacity,
                cpu_utilization: 0.0,
                cpu_accum: 0.0,
                cpu_ticks: 0,
            })
            .collect();
        let mut assignment = Assignment::initial(config.workload.num_partitions, &ids)?;
        if config.rebalance.num_standby_replicas > 0 {
            assignment = place_standbys(&assignment, &ids, config.rebalance.num_standby_replicas);
        }
        let tasks = (0..config.workload.num_partitions)
            .map(|t| TaskState {
                task_id: t,
                owner: assignment.active[t],
                produced_offset: 0.0,
                consumed_offset: 0.0,
                high_water: 0.0,
                last_commit_offset: 0.0,
                changelog_backlog: 0.0,
                state_size: 0.0,
                last_service_time: 0.0,
                window: OpenWindow::new(0, 0.0),
            })
            .collect();
        let mut state = Self {
            config: config.clone(),
            tick: 0,
            workers,
            tasks,
            assignment,
            replicas: BTreeMap::new(),
            incarnation: ids,
            events: Vec::new(),
            failures: Vec::new(),
            pending: BinaryHeap::new(),
            seq: 0,
            probe_generation: 0,
            plan,
            next_worker_id: n as u32,
            ledger: OutputLedger::default(),
            raw: RawSamples::default(),
            second_input: 0.0,
            second_output: 0.0,
            latency_obs: Vec::new(),
            rng,
        };
        // fresh replicas start empty, like their tasks
        let keys: Vec<(TaskId, WorkerId)> = state
            .assignment
            .standby
            .iter()
            .flat_map(|(t, hs)| hs.iter().map(move |w| (*t, *w)))
            .collect();
        for k in keys {
            state.replicas.insert(k, 0.0);
        }
        for i in 0..state.plan.len() {
            let tick = seconds_to_ticks(state.plan[i].time, config.engine.tick);
            state.schedule(tick, ScheduledEvent::Failure { index: i });
        }
        Ok(state)
    }

    pub fn dt(&self) -> f64 {
        self.config.engine.tick
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 * self.dt()
    }

    pub fn failure_plan(&self) -> &[FailureEvent] {
        &self.plan
    }

    pub fn worker(&self, id: WorkerId) -> Option<&WorkerInstance> {
        self.workers.iter().find(|w| w.worker_id == id)
    }

    pub(crate) fn worker_mut(&mut self, id: WorkerId) -> Option<&mut WorkerInstance> {
        self.workers.iter_mut().find(|w| w.worker_id == id)
    }

    pub fn live_workers(&self) -> Vec<WorkerId> {
        self.workers.iter().filter(|w| w.alive).map(|w| w.worker_id).collect()
    }

    /// Tasks held by `worker`, with the role it plays for each.
    pub fn assigned_tasks(&self, worker: WorkerId) -> Vec<(TaskId, TaskStatus)> {
        let mut out: Vec<(TaskId, TaskStatus)> =
            self.assignment.tasks_of(worker).map(|t| (t, TaskStatus::Active)).collect();
        out.extend(self.assignment.warming.iter().filter(|(_, w)| **w == worker).map(|(t, _)| (*t, TaskStatus::Warming)));
        out.extend(
            self.assignment
                .standby
                .iter()
                .filter(|(_, h)| h.contains(&worker))
                .map(|(t, _)| (*t, TaskStatus::Standby)),
        );
        out
    }

    pub fn total_lag(&self) -> f64 {
        self.tasks.iter().map(TaskState::lag).sum()
    }

    pub(crate) fn schedule(&mut self, tick: u64, event: ScheduledEvent) {
        self.seq += 1;
        self.pending.push(Reverse(Scheduled { tick, seq: self.seq, event }));
    }

    pub(crate) fn log(&mut self, kind: EventKind, details: String) {
        let time = self.time();
        self.events.push(LogEvent { time, kind, details });
    }

    pub(crate) fn log_rebalance(&mut self, trigger: &str, migrations: usize) {
        let live = self.live_workers();
        let imb = imbalance(&self.assignment, &live).unwrap_or(0);
        let details = format!(
            "epoch={} migrations={} imbalance={} warming={} trigger={}",
            self.assignment.epoch,
            migrations,
            imb,
            self.assignment.warming.len(),
            trigger
        );
        self.log(EventKind::Rebalance, details);
    }

    fn needs_probe(&self) -> bool {
        let live = self.live_workers();
        !self.assignment.warming.is_empty() || imbalance(&self.assignment, &live).is_ok_and(|i| i > 1)
    }

    /// Re-arms the probing timer one interval from now, or disarms it once
    /// the assignment is balanced with nothing warming.
    pub(crate) fn schedule_probe(&mut self) {
        self.probe_generation += 1;
        if self.needs_probe() {
            let tick = self.tick + seconds_to_ticks(self.config.rebalance.probing_interval, self.dt());
            let generation = self.probe_generation;
            self.schedule(tick, ScheduledEvent::Probe { generation });
        }
    }

    pub(crate) fn add_worker(&mut self, slot: usize) -> WorkerId {
        let id = WorkerId(self.next_worker_id);
        self.next_worker_id += 1;
        self.workers.push(WorkerInstance {
            worker_id: id,
            slot,
            alive: true,
            capacity: self.config.cluster.worker_capacity,
            cpu_utilization: 0.0,
            cpu_accum: 0.0,
            cpu_ticks: 0,
        });
        self.incarnation[slot] = id;
        id
    }

    /// Rebalance after a join: warm-ups are placed, nothing is promoted.
    pub(crate) fn membership_rebalance(&mut self) {
        let live = self.live_workers();
        let cap = self.config.rebalance.max_warmup_replicas;
        if let Ok((next, outcome)) = probing_rebalance(&self.assignment, &live, cap, |_, _| false) {
            let next = self.with_standbys(next, &live);
            let applied = self.apply_assignment(next);
            debug_assert!(outcome.promoted.is_empty());
            self.log_rebalance("join", applied.migrations);
        }
        self.schedule_probe();
    }

    fn probe(&mut self) {
        let live = self.live_workers();
        let cap = self.config.rebalance.max_warmup_replicas;
        let lag_ok = self.config.rebalance.acceptable_recovery_lag;
        let replicas = &self.replicas;
        let state_size: Vec<f64> = self.tasks.iter().map(|t| t.state_size).collect();
        let ready = |t: TaskId, w: WorkerId| {
            let backlog = replicas.get(&(t, w)).copied().unwrap_or(state_size[t]);
            warmup_ready(backlog, lag_ok)
        };
        if let Ok((next, _)) = probing_rebalance(&self.assignment, &live, cap, ready) {
            let next = self.with_standbys(next, &live);
            let applied = self.apply_assignment(next);
            self.log_rebalance("probe", applied.migrations);
        }
        self.schedule_probe();
    }

    fn with_standbys(&self, next: Assignment, live: &[WorkerId]) -> Assignment {
        match self.config.rebalance.num_standby_replicas {
            0 => next,
            n => place_standbys(&next, live, n),
        }
    }

    /// Installs `next`, moving task ownership. A task changing hands from a
    /// live owner commits first; its new owner restores from its replica when
    /// it has one, otherwise from the full state.
    pub(crate) fn apply_assignment(&mut self, next: Assignment) -> AppliedChange {
        let mut change = AppliedChange::default();
        let alive: BTreeSet<WorkerId> = self.live_workers().into_iter().collect();
        for (t, task) in self.tasks.iter_mut().enumerate() {
            let new_owner = next.active[t];
            if new_owner == task.owner {
                continue;
            }
            if task.owner.is_some_and(|o| alive.contains(&o)) {
                task.last_commit_offset = task.consumed_offset;
            }
            task.owner = new_owner;
            if let Some(w) = new_owner {
                let backlog = match self.replicas.get(&(t, w)) {
                    Some(b) => *b,
                    None => {
                        change.restored_records += task.state_size;
                        task.state_size
                    }
                };
                task.changelog_backlog = backlog;
                change.migrations += 1;
            }
        }
        let mut wanted: BTreeSet<(TaskId, WorkerId)> = next.warming.iter().map(|(t, w)| (*t, *w)).collect();
        for (t, holders) in &next.standby {
            wanted.extend(holders.iter().map(|w| (*t, *w)));
        }
        self.replicas.retain(|k, _| wanted.contains(k));
        for k in wanted {
            let size = self.tasks[k.0].state_size;
            self.replicas.entry(k).or_insert(size);
        }
        self.assignment = next;
        change
    }

    fn handle(&mut self, event: ScheduledEvent) -> Result<(), EngineError> {
        match event {
            ScheduledEvent::Failure { index } => {
                let ev = self.plan[index].clone();
                let record = kill_workers(self, &ev)?;
                self.failures.push(record);
            }
            ScheduledEvent::Join { slot } => {
                spawn_replacement(self, slot);
            }
            ScheduledEvent::Probe { generation } => {
                if generation == self.probe_generation {
                    self.probe();
                }
            }
        }
        Ok(())
    }

    fn process_due_events(&mut self) -> Result<(), EngineError> {
        while let Some(Reverse(next)) = self.pending.peek().copied() {
            if next.tick > self.tick {
                break;
            }
            self.pending.pop();
            self.handle(next.event)?;
        }
        Ok(())
    }

    /// Appends `arrival_rate / partitions * dt` records to every partition.
    pub fn generate_load(&mut self, dt: f64) {
        let per_partition = self.config.workload.partition_rate() * dt;
        if per_partition == 0.0 {
            return;
        }
        for t in self.tasks.iter_mut() {
            t.produced_offset += per_partition;
        }
    }

    /// Commits every task's consumed position and closes its ledger window.
    pub fn commit_tick(&mut self) {
        let now = self.time();
        for task in self.tasks.iter_mut() {
            task.last_commit_offset = task.consumed_offset;
            self.ledger.windows.push(task.close_window(now));
        }
    }

    /// Accounts `processed` records of `task` in its open window.
    fn emit_output(&mut self, task: TaskId, processed: f64) {
        let sel = self.config.workload.selectivity;
        let t = &mut self.tasks[task];
        let (fresh, replayed) = if t.consumed_offset >= t.high_water {
            (processed, 0.0)
        } else {
            let fresh = (t.consumed_offset + processed - t.high_water).clamp(0.0, processed);
            (fresh, processed - fresh)
        };
        t.window.expected += sel * fresh;
        t.window.emitted += sel * processed;
        t.window.replayed_records += replayed;
        t.consumed_offset += processed;
        t.high_water = t.high_water.max(t.consumed_offset);
        self.second_output += sel * processed;
        self.second_input += processed;
    }

    /// Integrates one tick of length `dt`: load, replay, service, outputs,
    /// latency observations and CPU accounting.
    pub fn advance(&mut self, dt: f64) {
        self.generate_load(dt);
        let now_end = self.time() + dt;
        let capacity_dt = self.config.cluster.worker_capacity * dt;
        let replay_dt = self.config.cluster.replay_rate * dt;
        let base = self.config.workload.base_processing_latency;
        let knee = self.config.engine.contention_knee;
        let buffer = self.config.engine.fetch_buffer_records;
        let arrival = self.config.workload.partition_rate();
        let state_cap = self.config.engine.state_cap * arrival;

        let mut processed_by_task = vec![0.0; self.tasks.len()];
        let mut observations = Vec::with_capacity(self.tasks.len());

        let live = self.live_workers();
        for w in &live {
            let own: Vec<TaskId> = self.assignment.tasks_of(*w).collect();
            let mut used = 0.0;

            let restoring: Vec<TaskId> = own.iter().copied().filter(|t| self.tasks[*t].is_restoring()).collect();
            let restore_total: f64 = restoring.iter().map(|t| self.tasks[*t].changelog_backlog).sum();
            let mut replayed = 0.0;
            if restore_total > 0.0 {
                let done = restore_total.min(replay_dt);
                for t in &restoring {
                    let task = &mut self.tasks[*t];
                    if done >= restore_total {
                        task.changelog_backlog = 0.0;
                    } else {
                        task.changelog_backlog -= task.changelog_backlog * done / restore_total;
                    }
                }
                used += done / replay_dt;
                replayed += done;
            }

            let serving: Vec<TaskId> = own.iter().copied().filter(|t| !restoring.contains(t)).collect();
            let budget = (1.0 - used).max(0.0) * capacity_dt;
            let demands: Vec<f64> = serving.iter().map(|t| self.tasks[*t].queue()).collect();
            let alloc = water_fill(&demands, budget);
            let share_rate = if serving.is_empty() { 0.0 } else { budget / serving.len() as f64 / dt };
            for (t, x) in serving.iter().zip(&alloc) {
                processed_by_task[*t] = *x;
                used += x / capacity_dt;
            }

            let mut replica_keys: Vec<(TaskId, WorkerId)> =
                self.replicas.keys().filter(|(_, rw)| rw == w).copied().collect();
            replica_keys.sort();
            let replica_total: f64 = replica_keys.iter().map(|k| self.replicas[k]).sum();
            if replica_total > 0.0 {
                let avail = (1.0 - used).max(0.0) * replay_dt;
                let done = replica_total.min(avail);
                for k in &replica_keys {
                    let b = self.replicas.get_mut(k).unwrap();
                    if done >= replica_total {
                        *b = 0.0;
                    } else {
                        *b -= *b * done / replica_total;
                    }
                }
                replayed += done;
            }

            let assigned_arrival = own.len() as f64 * arrival;
            let replay_load = replayed / dt * self.config.cluster.worker_capacity / self.config.cluster.replay_rate;
            let util = ((assigned_arrival + replay_load) / self.config.cluster.worker_capacity).min(1.0);
            let nominal_rate = if own.is_empty() { 0.0 } else { self.config.cluster.worker_capacity / own.len() as f64 };

            for t in own.iter() {
                let served = serving.contains(t);
                let x = processed_by_task[*t];
                let task = &self.tasks[*t];
                let waiting_after = (task.queue() - x).max(0.0);
                if served {
                    let latency = compute_event_latency(waiting_after.min(buffer), share_rate, base, util, knee);
                    observations.push((latency, x));
                } else {
                    let latency = unserved_latency(
                        now_end - task.last_service_time,
                        waiting_after.min(buffer),
                        nominal_rate,
                        base,
                    );
                    observations.push((latency, arrival * dt));
                }
            }

            let worker = self.worker_mut(*w).expect("live worker exists");
            worker.cpu_utilization = util;
            worker.cpu_accum += util;
            worker.cpu_ticks += 1;
        }

        for task in self.tasks.iter() {
            if task.owner.is_none() {
                let latency = unserved_latency(now_end - task.last_service_time, 0.0, 0.0, base);
                observations.push((latency, arrival * dt));
            }
        }

        for t in 0..self.tasks.len() {
            let x = processed_by_task[t];
            let served = self.tasks[t].owner.is_some() && !self.tasks[t].is_restoring();
            if x > 0.0 {
                self.emit_output(t, x);
                let task = &mut self.tasks[t];
                task.state_size = (task.state_size + x).min(state_cap);
                for ((rt, _), b) in self.replicas.range_mut((t, WorkerId(0))..=(t, WorkerId(u32::MAX))) {
                    debug_assert_eq!(*rt, t);
                    *b = (*b + x).min(state_cap);
                }
            }
            if served {
                self.tasks[t].last_service_time = now_end;
            }
        }

        for (lat, weight) in observations {
            self.latency_obs.push((lat * 1000.0, weight));
        }
        self.tick += 1;
    }

    fn close_second(&mut self) {
        self.raw.input_per_s.push(std::mem::take(&mut self.second_input));
        self.raw.output_per_s.push(std::mem::take(&mut self.second_output));
        let lag = self.total_lag();
        self.raw.lag_per_s.push(lag);
    }

    fn close_latency_window(&mut self) {
        let start = self.time() - LATENCY_WINDOW_S as f64;
        let obs = std::mem::take(&mut self.latency_obs);
        let window = match window_percentiles(&obs) {
            Some((p50, p90, p99)) => LatencyWindow { window_start: start, p50, p90, p99 },
            None => match self.raw.latency_windows.last() {
                Some(prev) => LatencyWindow { window_start: start, ..*prev },
                None => {
                    let base = self.config.workload.base_processing_latency * 1000.0;
                    LatencyWindow { window_start: start, p50: base, p90: base, p99: base }
                }
            },
        };
        self.raw.latency_windows.push(window);
    }

    fn close_cpu_sample(&mut self) {
        let t = self.time();
        for w in self.workers.iter_mut() {
            if w.cpu_ticks > 0 {
                self.raw.cpu.push(CpuSample { t, worker: w.worker_id, util: w.cpu_accum / w.cpu_ticks as f64 });
            }
            w.cpu_accum = 0.0;
            w.cpu_ticks = 0;
        }
    }

    /// Advances the simulation until `until` seconds, firing due events.
    pub fn run_until(&mut self, until: f64) -> Result<(), EngineError> {
        let dt = self.dt();
        let end_tick = seconds_to_ticks(until, dt);
        let per_second = seconds_to_ticks(1.0, dt).max(1);
        let commit_every = seconds_to_ticks(self.config.rebalance.commit_interval, dt).max(1);
        let window_every = per_second * LATENCY_WINDOW_S;
        let cpu_every = per_second * CPU_CADENCE_S;
        while self.tick < end_tick {
            self.process_due_events()?;
            if self.tick > 0 && self.tick.is_multiple_of(commit_every) {
                self.commit_tick();
            }
            self.advance(dt);
            if self.tick.is_multiple_of(per_second) {
                self.close_second();
            }
            if self.tick.is_multiple_of(window_every) {
                self.close_latency_window();
            }
            if self.tick.is_multiple_of(cpu_every) {
                self.close_cpu_sample();
            }
        }
        Ok(())
    }

    /// Closes open ledger windows and packages the run.
    pub fn finish(mut self, seed: u64) -> RunArtifacts {
        let now = self.time();
        for task in self.tasks.iter_mut() {
            self.ledger.windows.push(task.close_window(now));
        }
        self.ledger.windows.sort_by_key(|a| (a.task, a.index));
        RunArtifacts {
            config: self.config,
            seed,
            raw: self.raw,
            ledger: self.ledger,
            events: self.events,
            failures: self.failures,
        }
    }
}

/// Runs `config` from t=0 to its run duration. The failure plan is drawn
/// from `seed`; `config.seed` is ignored.
pub fn run(config: &ScenarioConfig, seed: u64) -> Result<RunArtifacts, EngineError> {
    let mut state = ClusterState::new(config, seed)?;
    state.run_until(config.run_duration)?;
    Ok(state.finish(seed))
}
