//! Reference schedulers: greedy insertion, RAMP label setting on the
//! discrete graph, and an exhaustive oracle for small instances.
//!
//! Greedy and the oracle work in continuous time with the earliest-start
//! rule; the first acquisition of a sequence departs from the origin
//! attitude exactly as in the discrete graph.

use std::collections::HashMap;
use std::fmt;
use std::time::Instant;

use serde::Serialize;

use crate::discrete_graph::{DiscreteGraph, NodeId, ORIGIN};
use crate::error::{Error, Result};
use crate::instance::{origin_transition_duration, ready_time, Instance};
use crate::schedule::{schedule_utility, Schedule};

pub use crate::schedule::{validate_schedule, Violation};

/// Default cap on instance size for [`exact_oracle`].
pub const ORACLE_DEFAULT_LIMIT: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Greedy,
    Ramp,
    Oracle,
    Policy,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Greedy => "greedy",
            Algorithm::Ramp => "ramp",
            Algorithm::Oracle => "oracle",
            Algorithm::Policy => "policy",
        })
    }
}

/// A solver's schedule with its score.
///
/// `utility` and `count` are recomputed from `schedule`, never reported by
/// the solver itself.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverReport {
    pub schedule: Schedule,
    pub utility: f64,
    pub count: usize,
    pub runtime_s: f64,
    pub algorithm: Algorithm,
}

impl SolverReport {
    pub fn new(inst: &Instance, schedule: Schedule, algorithm: Algorithm, runtime_s: f64) -> Self {
        SolverReport {
            utility: schedule_utility(inst, &schedule),
            count: schedule.len(),
            schedule,
            runtime_s,
            algorithm,
        }
    }
}

/// Earliest start of `j` after `prev` (or after the origin when `None`).
fn earliest_start(inst: &Instance, prev: Option<(usize, f64)>, j: usize) -> f64 {
    let aj = &inst.acquisitions[j];
    let ready = match prev {
        None => origin_transition_duration(aj, &inst.model),
        Some((i, t_i)) => ready_time(&inst.acquisitions[i], t_i, aj, &inst.model),
    };
    ready.max(aj.e)
}

/// Greedy insertion.
///
/// Candidates are taken by decreasing utility (ties: earlier window, then
/// lower id). Each is tried at every position of the current sequence; start
/// times after the insertion point are recomputed with the earliest-start
/// rule, and the feasible position that delays the already accepted tasks
/// the least (ties: earliest position) wins. Accepted tasks are never dropped.
pub fn greedy_schedule(inst: &Instance) -> SolverReport {
    let clock = Instant::now();
    let sched = greedy_run(inst, |_| {});
    SolverReport::new(inst, sched, Algorithm::Greedy, clock.elapsed().as_secs_f64())
}

/// [`greedy_schedule`] that also reports the sequence length after every
/// candidate considered.
pub fn greedy_trace(inst: &Instance) -> (SolverReport, Vec<usize>) {
    let clock = Instant::now();
    let mut trace = Vec::with_capacity(inst.len());
    let sched = greedy_run(inst, |len| trace.push(len));
    let report = SolverReport::new(inst, sched, Algorithm::Greedy, clock.elapsed().as_secs_f64());
    (report, trace)
}

fn greedy_run(inst: &Instance, mut on_candidate: impl FnMut(usize)) -> Schedule {
    let acqs = &inst.acquisitions;
    let mut order: Vec<usize> = (0..acqs.len()).collect();
    order.sort_by(|&a, &b| {
        acqs[b]
            .utility
            .total_cmp(&acqs[a].utility)
            .then(acqs[a].e.total_cmp(&acqs[b].e))
            .then(a.cmp(&b))
    });

    // Chronological sequence of (id, start).
    let mut seq: Vec<(usize, f64)> = Vec::new();
    let mut trial: Vec<f64> = Vec::new();
    for &c in &order {
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for pos in 0..=seq.len() {
            let prev = pos.checked_sub(1).map(|p| seq[p]);
            let t_c = earliest_start(inst, prev, c);
            if t_c > acqs[c].latest_start() {
                continue;
            }
            trial.clear();
            let mut prev = (c, t_c);
            let mut delay = 0.0;
            let mut ok = true;
            for &(k, old) in &seq[pos..] {
                let t_k = earliest_start(inst, Some(prev), k);
                if t_k > acqs[k].latest_start() {
                    ok = false;
                    break;
                }
                delay += t_k - old;
                trial.push(t_k);
                prev = (k, t_k);
            }
            if !ok {
                continue;
            }
            if best.as_ref().map_or(true, |b| delay < b.0) {
                best = Some((delay, pos, trial.clone()));
            }
        }
        if let Some((_, pos, times)) = best {
            for (slot, t) in seq[pos..].iter_mut().zip(times) {
                slot.1 = t;
            }
            let t_c = earliest_start(inst, pos.checked_sub(1).map(|p| seq[p]), c);
            seq.insert(pos, (c, t_c));
        }
        on_candidate(seq.len());
    }
    seq.into_iter().collect()
}

/// RAMP: label-setting search over the discrete graph.
///
/// Every node keeps one label (best cumulative utility from the origin and a
/// parent pointer). Nodes are settled in time order, which is a topological
/// order since edges strictly increase time. A successor whose acquisition
/// already lies on the label's parent chain is skipped, so the search is not
/// globally optimal in general.
pub fn ramp_schedule(inst: &Instance) -> SolverReport {
    let clock = Instant::now();
    let g = DiscreteGraph::build(inst);
    let sched = ramp_on_graph(inst, &g);
    SolverReport::new(inst, sched, Algorithm::Ramp, clock.elapsed().as_secs_f64())
}

/// Per-node labels produced by [`ramp_labels`].
#[derive(Debug, Clone)]
pub struct RampLabels {
    /// Best utility reaching each node; `None` when never labeled.
    pub value: Vec<Option<f64>>,
    pub parent: Vec<Option<NodeId>>,
}

impl RampLabels {
    /// Nodes on the best path to `v`, origin excluded, in time order.
    pub fn path_to(&self, mut v: NodeId) -> Vec<NodeId> {
        let mut path = Vec::new();
        while v != ORIGIN {
            path.push(v);
            v = self.parent[v].expect("labeled nodes have parents");
        }
        path.reverse();
        path
    }
}

/// Runs the label-setting pass over a graph and returns all labels.
pub fn ramp_labels(inst: &Instance, g: &DiscreteGraph) -> RampLabels {
    let cap = g.capacity();
    let mut value: Vec<Option<f64>> = vec![None; cap];
    let mut parent: Vec<Option<NodeId>> = vec![None; cap];
    value[ORIGIN] = Some(0.0);

    let mut order: Vec<NodeId> = g.live_nodes().collect();
    order.sort_by(|&a, &b| g.node(a).start.total_cmp(&g.node(b).start).then(a.cmp(&b)));

    let mut on_chain = vec![false; g.acquisition_count()];
    let mut chain = Vec::new();
    for &u in &order {
        let Some(label) = value[u] else { continue };
        chain.clear();
        let mut w = u;
        while w != ORIGIN {
            let a = g.node(w).acq.expect("non-origin node");
            on_chain[a] = true;
            chain.push(a);
            w = parent[w].expect("labeled nodes have parents");
        }
        for v in g.out_edges(u) {
            let a = g.node(v).acq.expect("edges never enter the origin");
            if on_chain[a] {
                continue;
            }
            let cand = label + inst.acquisitions[a].utility;
            if value[v].map_or(true, |old| cand > old) {
                value[v] = Some(cand);
                parent[v] = Some(u);
            }
        }
        for &a in &chain {
            on_chain[a] = false;
        }
    }
    RampLabels { value, parent }
}

fn ramp_on_graph(inst: &Instance, g: &DiscreteGraph) -> Schedule {
    let labels = ramp_labels(inst, g);
    let mut best = (0.0, ORIGIN);
    for v in g.live_nodes() {
        if let Some(val) = labels.value[v] {
            if val > best.0 {
                best = (val, v);
            }
        }
    }
    labels
        .path_to(best.1)
        .into_iter()
        .map(|v| {
            let n = g.node(v);
            (n.acq.expect("non-origin node"), n.start)
        })
        .collect()
}

/// Exhaustive search over acquisition sequences under the earliest-start rule.
///
/// Refuses instances with more than `limit` acquisitions (at most 64).
pub fn exact_oracle(inst: &Instance, limit: usize) -> Result<SolverReport> {
    let n = inst.len();
    if n > limit || n > 64 {
        return Err(Error::OracleLimit { n, limit: limit.min(64) });
    }
    let clock = Instant::now();
    let mut search = Oracle {
        inst,
        memo: HashMap::new(),
    };
    let mut sched = Schedule::new();
    let mut state = (0u64, None::<(usize, f64)>);
    loop {
        let (_, next) = search.best(state.0, state.1);
        let Some((j, t_j)) = next else { break };
        sched.insert(j, t_j);
        state = (state.0 | 1 << j, Some((j, t_j)));
    }
    Ok(SolverReport::new(inst, sched, Algorithm::Oracle, clock.elapsed().as_secs_f64()))
}

type OracleKey = (u64, Option<(usize, u64)>);

struct Oracle<'a> {
    inst: &'a Instance,
    /// Best continuation value and first move, keyed by visited set, last
    /// acquisition and its exact start time.
    memo: HashMap<OracleKey, (f64, Option<(usize, f64)>)>,
}

impl Oracle<'_> {
    fn best(&mut self, visited: u64, last: Option<(usize, f64)>) -> (f64, Option<(usize, f64)>) {
        let key = (visited, last.map(|(i, t)| (i, t.to_bits())));
        if let Some(&hit) = self.memo.get(&key) {
            return hit;
        }
        let mut best = (0.0, None);
        for j in 0..self.inst.len() {
            if visited & (1 << j) != 0 {
                continue;
            }
            let t_j = earliest_start(self.inst, last, j);
            if t_j > self.inst.acquisitions[j].latest_start() {
                continue;
            }
            let (rest, _) = self.best(visited | 1 << j, Some((j, t_j)));
            let total = self.inst.acquisitions[j].utility + rest;
            if total > best.0 {
                best = (total, Some((j, t_j)));
            }
        }
        self.memo.insert(key, best);
        best
    }
}
