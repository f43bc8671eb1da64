//! Task assignment: sticky balanced targets, immediate failover, probing
//! rebalances with capped warm-up replicas, and standby placement.
//!
//! Everything here is a pure function over [`Assignment`] values. The engine
//! owns the clock and decides when each operation fires.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WorkerId(pub u32);

impl fmt::Display for WorkerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub type TaskId = usize;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RebalanceError {
    #[error("cluster down: no live workers")]
    ClusterDown,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    /// Active owner per task, indexed by task id.
    pub active: Vec<Option<WorkerId>>,
    pub warming: BTreeMap<TaskId, WorkerId>,
    pub standby: BTreeMap<TaskId, BTreeSet<WorkerId>>,
    pub epoch: u64,
}

impl Assignment {
    /// Balanced assignment of `num_tasks` fresh tasks over `workers`.
    pub fn initial(num_tasks: usize, workers: &[WorkerId]) -> Result<Self, RebalanceError> {
        let empty = Assignment {
            active: vec![None; num_tasks],
            warming: BTreeMap::new(),
            standby: BTreeMap::new(),
            epoch: 0,
        };
        compute_target_assignment(workers, &empty)
    }

    pub fn num_tasks(&self) -> usize {
        self.active.len()
    }

    /// Active task count for every listed worker (zero included).
    pub fn active_counts(&self, live: &[WorkerId]) -> BTreeMap<WorkerId, usize> {
        let mut counts: BTreeMap<WorkerId, usize> = live.iter().map(|w| (*w, 0)).collect();
        for owner in self.active.iter().flatten() {
            if let Some(c) = counts.get_mut(owner) {
                *c += 1;
            }
        }
        counts
    }

    pub fn tasks_of(&self, worker: WorkerId) -> impl Iterator<Item = TaskId> + '_ {
        self.active
            .iter()
            .enumerate()
            .filter(move |(_, o)| **o == Some(worker))
            .map(|(t, _)| t)
    }

    pub fn has_standby(&self, task: TaskId, worker: WorkerId) -> bool {
        self.standby.get(&task).is_some_and(|s| s.contains(&worker))
    }

    fn strip_to(&mut self, live: &BTreeSet<WorkerId>) {
        self.warming.retain(|_, w| live.contains(w));
        for holders in self.standby.values_mut() {
            holders.retain(|w| live.contains(w));
        }
        self.standby.retain(|_, h| !h.is_empty());
    }
}

fn sorted_live(live: &[WorkerId]) -> Vec<WorkerId> {
    let mut v = live.to_vec();
    v.sort();
    v.dedup();
    v
}

/// Balanced ideal assignment: per-worker counts differ by at most one and the
/// number of tasks moved away from a live owner is minimal.
///
/// The workers with the most current tasks receive the larger quotas.
/// Donors keep their lowest task ids; released and unowned tasks fill
/// under-quota workers in ascending worker id order.
pub fn compute_target_assignment(
    live: &[WorkerId],
    current: &Assignment,
) -> Result<Assignment, RebalanceError> {
    let active = target_with_hints(live, &current.active, &BTreeMap::new())?;
    Ok(Assignment {
        active: active.into_iter().map(Some).collect(),
        warming: BTreeMap::new(),
        standby: BTreeMap::new(),
        epoch: current.epoch,
    })
}

/// Same as [`compute_target_assignment`], but a released task whose hint names
/// an under-quota worker goes to that worker first. Probing rebalances pass
/// the current warm-ups as hints so that in-flight restorations stay useful.
pub(crate) fn target_with_hints(
    live: &[WorkerId],
    active: &[Option<WorkerId>],
    hints: &BTreeMap<TaskId, WorkerId>,
) -> Result<Vec<WorkerId>, RebalanceError> {
    let workers = sorted_live(live);
    if workers.is_empty() {
        return Err(RebalanceError::ClusterDown);
    }
    let n = active.len();
    let m = workers.len();
    let (q, r) = (n / m, n % m);

    let mut owned: BTreeMap<WorkerId, Vec<TaskId>> = workers.iter().map(|w| (*w, Vec::new())).collect();
    let mut pool = Vec::new();
    for (task, owner) in active.iter().enumerate() {
        match owner.and_then(|w| owned.get_mut(&w)) {
            Some(list) => list.push(task),
            None => pool.push(task),
        }
    }

    let mut by_load = workers.clone();
    by_load.sort_by(|a, b| owned[b].len().cmp(&owned[a].len()).then(a.cmp(b)));
    let quota: BTreeMap<WorkerId, usize> = by_load
        .iter()
        .enumerate()
        .map(|(i, w)| (*w, if i < r { q + 1 } else { q }))
        .collect();

    let mut target = vec![workers[0]; n];
    let mut filled: BTreeMap<WorkerId, usize> = BTreeMap::new();
    for w in &workers {
        let tasks = &owned[w];
        let keep = quota[w].min(tasks.len());
        // hinted tasks leave first, then the highest ids
        let mut order: Vec<TaskId> = tasks.clone();
        order.sort_by_key(|t| (hints.get(t).is_some_and(|h| h != w), *t));
        for (i, t) in order.into_iter().enumerate() {
            if i < keep {
                target[t] = *w;
            } else {
                pool.push(t);
            }
        }
        filled.insert(*w, keep);
    }
    pool.sort();

    let mut rest = Vec::new();
    for t in pool {
        match hints.get(&t) {
            Some(h) if filled.get(h).is_some_and(|f| *f < quota[h]) => {
                target[t] = *h;
                *filled.get_mut(h).unwrap() += 1;
            }
            _ => rest.push(t),
        }
    }
    let mut slots = workers.iter().flat_map(|w| std::iter::repeat_n(*w, quota[w] - filled[w]));
    for t in rest {
        target[t] = slots.next().expect("quotas sum to the task count");
    }
    Ok(target)
}

/// Number of tasks whose live owner differs between `from` and `to`.
pub fn migrations(from: &[Option<WorkerId>], to: &[WorkerId], live: &[WorkerId]) -> usize {
    from.iter()
        .zip(to)
        .filter(|(f, t)| matches!(f, Some(w) if live.contains(w) && w != *t))
        .count()
}

/// Max minus min active task count over live workers.
pub fn imbalance(assignment: &Assignment, live: &[WorkerId]) -> Result<usize, RebalanceError> {
    let counts = assignment.active_counts(live);
    let max = counts.values().max().ok_or(RebalanceError::ClusterDown)?;
    let min = counts.values().min().ok_or(RebalanceError::ClusterDown)?;
    Ok(max - min)
}

/// Failover after `lost` workers disappear. Orphans with a live standby go to
/// that holder; the rest are dealt round-robin over the survivors ordered by
/// (current load, id). No warm-up gating.
pub fn immediate_rebalance(
    assignment: &Assignment,
    lost: &[WorkerId],
    survivors: &[WorkerId],
) -> Assignment {
    let live: BTreeSet<WorkerId> = survivors.iter().copied().filter(|w| !lost.contains(w)).collect();
    let mut next = assignment.clone();
    next.epoch += 1;
    next.strip_to(&live);
    if live.is_empty() {
        for owner in next.active.iter_mut() {
            *owner = None;
        }
        return next;
    }

    let orphans: Vec<TaskId> = next
        .active
        .iter()
        .enumerate()
        .filter(|(_, o)| !o.is_some_and(|w| live.contains(&w)))
        .map(|(t, _)| t)
        .collect();

    let mut dealt = Vec::new();
    for t in orphans {
        let holder = next.standby.get(&t).and_then(|h| h.iter().next().copied());
        match holder {
            Some(w) => {
                next.active[t] = Some(w);
                let holders = next.standby.get_mut(&t).unwrap();
                holders.remove(&w);
                if holders.is_empty() {
                    next.standby.remove(&t);
                }
            }
            None => {
                next.active[t] = None;
                dealt.push(t);
            }
        }
    }

    let live_vec: Vec<WorkerId> = live.iter().copied().collect();
    let counts = next.active_counts(&live_vec);
    let mut order = live_vec;
    order.sort_by_key(|w| (counts[w], *w));
    for (i, t) in dealt.into_iter().enumerate() {
        next.active[t] = Some(order[i % order.len()]);
    }
    next.warming.retain(|t, w| next.active[*t] != Some(*w));
    next
}

/// What one probing round did.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ProbeOutcome {
    /// (task, previous owner, new owner) for every promoted warm-up.
    pub promoted: Vec<(TaskId, Option<WorkerId>, WorkerId)>,
    pub placed: Vec<(TaskId, WorkerId)>,
    pub dropped: Vec<(TaskId, WorkerId)>,
}

impl ProbeOutcome {
    pub fn changed(&self) -> bool {
        !(self.promoted.is_empty() && self.placed.is_empty() && self.dropped.is_empty())
    }
}

/// One probing rebalance: promote every ready warm-up, then place new warm-ups
/// toward the balanced target while at most `max_warmups` warm cluster-wide.
/// The epoch advances only when something changed.
pub fn probing_rebalance<F>(
    assignment: &Assignment,
    live: &[WorkerId],
    max_warmups: usize,
    mut ready: F,
) -> Result<(Assignment, ProbeOutcome), RebalanceError>
where
    F: FnMut(TaskId, WorkerId) -> bool,
{
    let live_set: BTreeSet<WorkerId> = live.iter().copied().collect();
    if live_set.is_empty() {
        return Err(RebalanceError::ClusterDown);
    }
    let mut next = assignment.clone();
    let mut outcome = ProbeOutcome::default();
    for (t, w) in &assignment.warming {
        if !live_set.contains(w) {
            outcome.dropped.push((*t, *w));
        }
    }
    next.strip_to(&live_set);

    let warming: Vec<(TaskId, WorkerId)> = next.warming.iter().map(|(t, w)| (*t, *w)).collect();
    for (t, w) in warming {
        if ready(t, w) {
            outcome.promoted.push((t, next.active[t], w));
            next.active[t] = Some(w);
            next.warming.remove(&t);
        }
    }

    let target = target_with_hints(live, &next.active, &next.warming)?;
    let stale: Vec<(TaskId, WorkerId)> = next
        .warming
        .iter()
        .filter(|(t, w)| target[**t] != **w)
        .map(|(t, w)| (*t, *w))
        .collect();
    for (t, w) in stale {
        next.warming.remove(&t);
        outcome.dropped.push((t, w));
    }

    for (t, dest) in target.iter().enumerate() {
        if next.warming.len() >= max_warmups {
            break;
        }
        if next.active[t] != Some(*dest) && !next.warming.contains_key(&t) {
            next.warming.insert(t, *dest);
            outcome.placed.push((t, *dest));
        }
    }

    // a promoted owner cannot keep a standby of its own task
    for (t, _, w) in &outcome.promoted {
        if let Some(h) = next.standby.get_mut(t) {
            h.remove(w);
        }
    }
    next.standby.retain(|_, h| !h.is_empty());

    if outcome.changed() {
        next.epoch += 1;
    }
    Ok((next, outcome))
}

/// A warm-up may be promoted once its changelog backlog is within the
/// acceptable lag (inclusive).
pub fn warmup_ready(changelog_backlog: f64, acceptable_recovery_lag: f64) -> bool {
    changelog_backlog <= acceptable_recovery_lag
}

/// Tops every task up to `replicas` standby holders, choosing the worker with
/// the fewest standbys (then lowest id) that is neither the active owner nor
/// an existing holder. Holders that became dead or colocated are removed.
pub fn place_standbys(assignment: &Assignment, live: &[WorkerId], replicas: usize) -> Assignment {
    let live_set: BTreeSet<WorkerId> = live.iter().copied().collect();
    let mut next = assignment.clone();
    next.strip_to(&live_set);
    for (t, holders) in next.standby.iter_mut() {
        if let Some(owner) = next.active[*t] {
            holders.remove(&owner);
        }
        while holders.len() > replicas {
            let last = *holders.iter().next_back().unwrap();
            holders.remove(&last);
        }
    }
    next.standby.retain(|_, h| !h.is_empty());
    if replicas == 0 {
        return next;
    }

    let mut load: BTreeMap<WorkerId, usize> = live_set.iter().map(|w| (*w, 0)).collect();
    for holders in next.standby.values() {
        for w in holders {
            *load.get_mut(w).unwrap() += 1;
        }
    }
    for t in 0..next.num_tasks() {
        let owner = next.active[t];
        loop {
            let holders = next.standby.entry(t).or_default();
            if holders.len() >= replicas {
                break;
            }
            let pick = load
                .iter()
                .filter(|(w, _)| Some(**w) != owner && !holders.contains(w))
                .min_by_key(|(w, c)| (**c, **w))
                .map(|(w, _)| *w);
            match pick {
                Some(w) => {
                    holders.insert(w);
                    *load.get_mut(&w).unwrap() += 1;
                }
                None => break,
            }
        }
    }
    // greedy filling can strand the last replicas; shift them until even
    loop {
        let (hi, hi_n) = load.iter().max_by_key(|(w, c)| (**c, std::cmp::Reverse(**w))).map(|(w, c)| (*w, *c)).unwrap();
        let (lo, lo_n) = load.iter().min_by_key(|(w, c)| (**c, **w)).map(|(w, c)| (*w, *c)).unwrap();
        if hi_n <= lo_n + 1 {
            break;
        }
        let movable = next
            .standby
            .iter()
            .find(|(t, h)| h.contains(&hi) && !h.contains(&lo) && next.active[**t] != Some(lo))
            .map(|(t, _)| *t);
        let Some(t) = movable else { break };
        let holders = next.standby.get_mut(&t).unwrap();
        holders.remove(&hi);
        holders.insert(lo);
        *load.get_mut(&hi).unwrap() -= 1;
        *load.get_mut(&lo).unwrap() += 1;
    }
    next.standby.retain(|_, h| !h.is_empty());
    next
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: u32) -> Vec<WorkerId> {
        (0..n).map(WorkerId).collect()
    }

    fn counts(a: &Assignment, live: &[WorkerId]) -> Vec<usize> {
        let mut c: Vec<usize> = a.active_counts(live).values().copied().collect();
        c.sort_unstable_by(|a, b| b.cmp(a));
        c
    }

    #[test]
    fn forty_tasks_on_eight_workers() {
        let a = Assignment::initial(40, &ids(8)).unwrap();
        assert_eq!(counts(&a, &ids(8)), vec![5; 8]);
        assert_eq!(imbalance(&a, &ids(8)).unwrap(), 0);
    }

    #[test]
    fn forty_tasks_on_six_workers() {
        let a = Assignment::initial(40, &ids(6)).unwrap();
        assert_eq!(counts(&a, &ids(6)), vec![7, 7, 7, 7, 6, 6]);
        assert_eq!(imbalance(&a, &ids(6)).unwrap(), 1);
    }

    #[test]
    fn target_is_idempotent() {
        let a = Assignment::initial(40, &ids(8)).unwrap();
        let b = compute_target_assignment(&ids(8), &a).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn no_live_workers_is_cluster_down() {
        let a = Assignment::initial(4, &ids(2)).unwrap();
        assert_eq!(compute_target_assignment(&[], &a), Err(RebalanceError::ClusterDown));
        assert_eq!(imbalance(&a, &[]), Err(RebalanceError::ClusterDown));
    }

    #[test]
    fn kill_two_of_eight() {
        let a = Assignment::initial(40, &ids(8)).unwrap();
        let survivors: Vec<_> = ids(8).into_iter().filter(|w| w.0 != 2 && w.0 != 5).collect();
        let b = immediate_rebalance(&a, &[WorkerId(2), WorkerId(5)], &survivors);
        assert_eq!(counts(&b, &survivors), vec![7, 7, 7, 7, 6, 6]);
        assert!(b.active.iter().all(|o| o.is_some_and(|w| survivors.contains(&w))));
        assert_eq!(b.epoch, a.epoch + 1);
    }

    #[test]
    fn kill_four_of_eight() {
        let a = Assignment::initial(40, &ids(8)).unwrap();
        let survivors = ids(4);
        let lost: Vec<_> = (4..8).map(WorkerId).collect();
        let b = immediate_rebalance(&a, &lost, &survivors);
        assert_eq!(counts(&b, &survivors), vec![10; 4]);
        assert_eq!(imbalance(&b, &survivors).unwrap(), 0);
    }

    #[test]
    fn killing_an_idle_worker_only_bumps_the_epoch() {
        let a = Assignment::initial(8, &ids(4)).unwrap();
        let b = immediate_rebalance(&a, &[WorkerId(9)], &ids(4));
        assert_eq!(b.active, a.active);
        assert_eq!(b.epoch, a.epoch + 1);
    }

    #[test]
    fn orphans_prefer_standby_holders() {
        let a = Assignment::initial(8, &ids(4)).unwrap();
        let a = place_standbys(&a, &ids(4), 1);
        let lost = WorkerId(0);
        let orphans: Vec<_> = a.tasks_of(lost).collect();
        let survivors: Vec<_> = ids(4).into_iter().filter(|w| *w != lost).collect();
        let b = immediate_rebalance(&a, &[lost], &survivors);
        for t in orphans {
            assert!(a.has_standby(t, b.active[t].unwrap()));
        }
    }

    /// Ten tasks must move onto two fresh workers; the warm-up cap decides
    /// how many probing rounds that takes.
    fn rounds_to_converge(cap: usize) -> usize {
        let fresh = [WorkerId(8), WorkerId(9)];
        let a = Assignment::initial(40, &ids(8)).unwrap();
        let survivors: Vec<_> = ids(8).into_iter().filter(|w| w.0 != 0 && w.0 != 1).collect();
        let mut state = immediate_rebalance(&a, &[WorkerId(0), WorkerId(1)], &survivors);
        let mut live = survivors.clone();
        live.extend(fresh);
        // membership change places the first warm-ups
        state = probing_rebalance(&state, &live, cap, |_, _| true).unwrap().0;
        assert!(state.active.iter().all(|o| !fresh.contains(&o.unwrap())));
        let mut rounds = 0;
        while imbalance(&state, &live).unwrap() > 1 {
            let (next, out) = probing_rebalance(&state, &live, cap, |_, _| true).unwrap();
            assert!(next.warming.len() <= cap);
            assert!(out.promoted.len() <= cap);
            state = next;
            rounds += 1;
            assert!(rounds < 50);
        }
        rounds
    }

    #[test]
    fn warmup_cap_two_needs_five_rounds() {
        assert_eq!(rounds_to_converge(2), 5);
    }

    #[test]
    fn warmup_cap_eight_needs_two_rounds() {
        assert_eq!(rounds_to_converge(8), 2);
    }

    #[test]
    fn balanced_assignment_is_a_probing_fixpoint() {
        let a = Assignment::initial(40, &ids(8)).unwrap();
        let (b, out) = probing_rebalance(&a, &ids(8), 8, |_, _| true).unwrap();
        assert_eq!(a, b);
        assert!(!out.changed());
    }

    #[test]
    fn unready_warmups_stay_put() {
        let a = Assignment::initial(10, &ids(1)).unwrap();
        let live = ids(2);
        let (b, out) = probing_rebalance(&a, &live, 3, |_, _| false).unwrap();
        assert_eq!(out.placed.len(), 3);
        let (c, out) = probing_rebalance(&b, &live, 3, |_, _| false).unwrap();
        assert!(!out.changed());
        assert_eq!(b, c);
        assert!(c.active.iter().all(|o| *o == Some(WorkerId(0))));
    }

    #[test]
    fn readiness_boundary_is_inclusive() {
        assert!(warmup_ready(0.0, 10_000.0));
        assert!(warmup_ready(10_000.0, 10_000.0));
        assert!(!warmup_ready(10_001.0, 10_000.0));
    }

    #[test]
    fn no_standbys_requested() {
        let a = Assignment::initial(40, &ids(8)).unwrap();
        assert!(place_standbys(&a, &ids(8), 0).standby.is_empty());
    }

    #[test]
    fn one_standby_each_spreads_evenly() {
        let a = Assignment::initial(40, &ids(8)).unwrap();
        let s = place_standbys(&a, &ids(8), 1);
        let mut per_worker: BTreeMap<WorkerId, usize> = BTreeMap::new();
        for (t, holders) in &s.standby {
            assert_eq!(holders.len(), 1);
            for w in holders {
                assert_ne!(s.active[*t], Some(*w));
                *per_worker.entry(*w).or_default() += 1;
            }
        }
        assert_eq!(s.standby.len(), 40);
        assert_eq!(per_worker.values().copied().collect::<Vec<_>>(), vec![5; 8]);
    }

    #[test]
    fn imbalance_is_count_only() {
        let live = ids(6);
        let a = Assignment::initial(40, &live).unwrap();
        assert_eq!(imbalance(&a, &live).unwrap(), 1);
        let four = Assignment::initial(40, &ids(4)).unwrap();
        assert_eq!(imbalance(&four, &ids(4)).unwrap(), 0);
    }
}
