//! Failure plans and their execution: killing workers, restoring orphaned
//! tasks on survivors, and spawning replacements.

use rand::seq::index::sample;
use rand::Rng;

use crate::engine::{ClusterState, EngineError, EventKind, FailureRecord, ScheduledEvent};
use crate::rebalance::{immediate_rebalance, place_standbys, WorkerId};
use crate::scenario::{seconds_to_ticks, ScenarioConfig};

/// One planned injection. `victims` are initial worker slots; at execution
/// time each slot resolves to its current incarnation.
#[derive(Debug, Clone, PartialEq)]
pub struct FailureEvent {
    pub index: usize,
    pub time: f64,
    pub victims: Vec<usize>,
    /// Replacement delay per victim, same order as `victims`.
    pub replacement_delays: Vec<f64>,
}

impl FailureEvent {
    pub fn replacement_times(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.victims.iter().zip(&self.replacement_delays).map(|(v, d)| (*v, self.time + d))
    }
}

/// Injection times at `first + k * period`; victims uniform without
/// replacement over the initial slots; delays uniform in `[min, max]`.
pub fn plan_failures<R: Rng>(config: &ScenarioConfig, rng: &mut R) -> Vec<FailureEvent> {
    let plan = &config.failures;
    let (lo, hi) = (config.cluster.replacement_delay_min, config.cluster.replacement_delay_max);
    (0..plan.num_failures)
        .map(|index| {
            let mut victims = sample(rng, config.cluster.num_workers, plan.kills_per_failure).into_vec();
            victims.sort_unstable();
            let replacement_delays = victims
                .iter()
                .map(|_| if hi > lo { rng.gen_range(lo..=hi) } else { lo })
                .collect();
            FailureEvent { index, time: plan.injection_time(index), victims, replacement_delays }
        })
        .collect()
}

/// Kills the current incarnation of every victim slot, rolls orphaned tasks
/// back to their last commit and fails them over immediately.
pub fn kill_workers(state: &mut ClusterState, event: &FailureEvent) -> Result<FailureRecord, EngineError> {
    let mut victims = Vec::with_capacity(event.victims.len());
    for slot in &event.victims {
        let id = state.incarnation[*slot];
        if !state.worker(id).is_some_and(|w| w.alive) {
            return Err(EngineError::KillDeadWorker(id));
        }
        victims.push(id);
    }
    let now = state.time();
    for id in &victims {
        let w = state.worker_mut(*id).expect("checked above");
        w.alive = false;
        w.cpu_utilization = 0.0;
        state.log(EventKind::Kill, format!("worker={id}"));
    }
    for task in state.tasks.iter_mut() {
        if task.owner.is_some_and(|o| victims.contains(&o)) {
            // in-flight progress and local state die with the worker
            task.consumed_offset = task.last_commit_offset;
            task.changelog_backlog = 0.0;
            task.owner = None;
        }
    }

    let live = state.live_workers();
    let mut next = immediate_rebalance(&state.assignment, &victims, &live);
    if state.config.rebalance.num_standby_replicas > 0 {
        next = place_standbys(&next, &live, state.config.rebalance.num_standby_replicas);
    }
    let restored = state.apply_assignment(next);
    state.log_rebalance("failure", restored.migrations);

    let mut replacements = Vec::new();
    for (slot, at) in event.replacement_times() {
        let tick = seconds_to_ticks(at, state.config.engine.tick);
        state.schedule(tick, ScheduledEvent::Join { slot });
        replacements.push((slot, at));
    }
    state.schedule_probe();

    Ok(FailureRecord {
        index: event.index,
        time: now,
        victims,
        replacement_times: replacements.into_iter().map(|(_, t)| t).collect(),
        state_restored: restored.restored_records,
    })
}

/// A fresh, empty worker takes over `slot`. It receives warm-ups from the
/// membership rebalance and active tasks only at subsequent probing rounds.
pub fn spawn_replacement(state: &mut ClusterState, slot: usize) -> WorkerId {
    let id = state.add_worker(slot);
    state.log(EventKind::Join, format!("worker={id}"));
    state.membership_rebalance();
    id
}
