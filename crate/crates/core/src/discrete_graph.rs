//! Time-expanded decision graph.
//!
//! Every acquisition appears once per grid start time in its window. An edge
//! `(i, t_i) -> (j, t_j)` links a node to the earliest grid start of `j` that
//! respects the maneuver from `i`:
//!
//! ```text
//! t_j >= t_i + d_i + transition(i, j, t_i),   e_j <= t_j <= l_j - d_j
//! ```
//!
//! An edge is pruned when a third acquisition `k` fits between its endpoints;
//! any schedule using it could be extended by `k`. The record of each pruned
//! edge keeps the `(k, t_k)` node that fits.
//!
//! Scheduling a node applies three updates: the last scheduled node keeps only
//! its edge to the new node, the other start times of the new acquisition are
//! deleted, and whatever became unreachable from the origin is deleted.

use std::collections::VecDeque;
use std::ops::Range;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::instance::{origin_transition_duration, ready_time, transition_unchecked, Instance};

pub type NodeId = usize;

/// The origin always has id 0.
pub const ORIGIN: NodeId = 0;

/// `(acquisition, start)` pair; the origin has no acquisition and starts at 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscreteNode {
    pub acq: Option<usize>,
    /// Grid index of the start time.
    pub slot: i64,
    pub start: f64,
}

impl DiscreteNode {
    pub fn is_origin(&self) -> bool {
        self.acq.is_none()
    }
}

/// Edge removed by pruning, with the node that fits in between.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrunedEdge {
    pub source: NodeId,
    pub target: NodeId,
    pub witness: NodeId,
}

/// Smallest `k` with `k * delta >= t`.
pub fn grid_ceil(t: f64, delta: f64) -> i64 {
    let mut k = (t / delta).ceil() as i64;
    while ((k - 1) as f64) * delta >= t {
        k -= 1;
    }
    while (k as f64) * delta < t {
        k += 1;
    }
    k
}

/// Largest `k` with `k * delta <= t`.
pub fn grid_floor(t: f64, delta: f64) -> i64 {
    let mut k = (t / delta).floor() as i64;
    while ((k + 1) as f64) * delta <= t {
        k += 1;
    }
    while (k as f64) * delta > t {
        k -= 1;
    }
    k
}

/// Node and edge counts of a graph state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GraphStats {
    /// Live nodes, the origin included.
    pub nodes: usize,
    pub edges: usize,
    /// Live nodes per acquisition id.
    pub per_acquisition: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct DiscreteGraph {
    nodes: Vec<DiscreteNode>,
    alive: Vec<bool>,
    out: Vec<Vec<u32>>,
    by_acq: Vec<Range<usize>>,
    last: NodeId,
    scheduled: Vec<NodeId>,
    pruned: Vec<PrunedEdge>,
    live_nodes: usize,
}

/// Builds the pruned, origin-reachable discrete graph of an instance.
pub fn build_discrete_graph(inst: &Instance) -> DiscreteGraph {
    DiscreteGraph::build(inst)
}

impl DiscreteGraph {
    pub fn build(inst: &Instance) -> Self {
        let model = &inst.model;
        let delta = model.delta;
        let n = inst.len();

        let mut nodes = vec![DiscreteNode {
            acq: None,
            slot: 0,
            start: 0.0,
        }];
        let mut by_acq = Vec::with_capacity(n);
        let mut first_slot = Vec::with_capacity(n);
        let mut last_slot = Vec::with_capacity(n);
        for a in &inst.acquisitions {
            let lo = grid_ceil(a.e, delta);
            let hi = grid_floor(a.latest_start(), delta);
            let begin = nodes.len();
            for slot in lo..=hi {
                nodes.push(DiscreteNode {
                    acq: Some(a.id),
                    slot,
                    start: slot as f64 * delta,
                });
            }
            by_acq.push(begin..nodes.len());
            first_slot.push(lo);
            last_slot.push(hi);
        }

        let node_at = |j: usize, slot: i64| by_acq[j].start + (slot - first_slot[j]) as usize;

        // Lower bound on when each acquisition can hand over to another one.
        let earliest_finish: Vec<f64> = (0..n)
            .map(|k| first_slot[k] as f64 * delta + inst.acquisitions[k].duration + model.settle)
            .collect();

        let mut out: Vec<Vec<u32>> = vec![Vec::new(); nodes.len()];
        let mut pruned = Vec::new();
        // Earliest grid slot reachable from the current source, per acquisition.
        let mut target: Vec<Option<i64>> = vec![None; n];
        let mut min_finish = vec![f64::INFINITY; n];

        for (src, node) in nodes.iter().enumerate() {
            for j in 0..n {
                target[j] = None;
                min_finish[j] = f64::INFINITY;
                if node.acq == Some(j) {
                    continue;
                }
                let aj = &inst.acquisitions[j];
                let depart = match node.acq {
                    None => origin_transition_duration(aj, model),
                    Some(i) => {
                        let ai = &inst.acquisitions[i];
                        ready_time(ai, node.start, aj, model)
                    }
                };
                let slot = grid_ceil(depart.max(aj.e), delta).max(first_slot[j]);
                if slot <= last_slot[j] {
                    target[j] = Some(slot);
                    min_finish[j] = slot as f64 * delta + aj.duration + model.settle;
                }
            }

            for j in 0..n {
                let Some(slot_j) = target[j] else { continue };
                let t_j = slot_j as f64 * delta;
                let aj = &inst.acquisitions[j];
                let mut witness = None;
                'search: for k in 0..n {
                    if k == j || min_finish[k] > t_j || (node.acq.is_some() && earliest_finish[k] <= node.start) {
                        continue;
                    }
                    let Some(slot_k) = target[k] else { continue };
                    let ak = &inst.acquisitions[k];
                    for s in slot_k..=last_slot[k] {
                        let t_k = s as f64 * delta;
                        if t_k + ak.duration + model.settle > t_j {
                            break;
                        }
                        if t_k + ak.duration + transition_unchecked(ak, t_k, aj, model) <= t_j {
                            witness = Some(node_at(k, s));
                            break 'search;
                        }
                    }
                }
                let dst = node_at(j, slot_j);
                match witness {
                    Some(w) => pruned.push(PrunedEdge {
                        source: src,
                        target: dst,
                        witness: w,
                    }),
                    None => out[src].push(dst as u32),
                }
            }
        }

        let count = nodes.len();
        let mut g = DiscreteGraph {
            nodes,
            alive: vec![true; count],
            out,
            by_acq,
            last: ORIGIN,
            scheduled: Vec::new(),
            pruned,
            live_nodes: count,
        };
        g.prune_unreachable();
        g
    }

    /// Deletes every node not reachable from the origin and drops dangling edges.
    fn prune_unreachable(&mut self) {
        let mut reached = vec![false; self.nodes.len()];
        reached[ORIGIN] = true;
        let mut queue = VecDeque::from([ORIGIN]);
        while let Some(u) = queue.pop_front() {
            let alive = &self.alive;
            self.out[u].retain(|&v| alive[v as usize]);
            for &v in &self.out[u] {
                let v = v as usize;
                if !reached[v] {
                    reached[v] = true;
                    queue.push_back(v);
                }
            }
        }
        let mut live = 0;
        for (id, r) in reached.into_iter().enumerate() {
            if r {
                live += 1;
            } else if self.alive[id] {
                self.alive[id] = false;
                self.out[id] = Vec::new();
            }
        }
        self.live_nodes = live;
    }

    /// Schedules `chosen`, which must be a successor of the last scheduled node.
    pub fn apply_schedule_step(&mut self, chosen: NodeId) -> Result<()> {
        let is_successor = chosen < self.nodes.len()
            && self.alive[chosen]
            && self.out[self.last].iter().any(|&v| v as usize == chosen);
        if !is_successor {
            return Err(Error::Contract(format!(
                "node {chosen} is not a successor of the last scheduled node {}",
                self.last
            )));
        }
        self.out[self.last].retain(|&v| v as usize == chosen);
        let acq = self.nodes[chosen].acq.expect("the origin is never a successor");
        for id in self.by_acq[acq].clone() {
            if id != chosen {
                self.alive[id] = false;
                self.out[id] = Vec::new();
            }
        }
        self.prune_unreachable();
        self.scheduled.push(chosen);
        self.last = chosen;
        Ok(())
    }

    /// Live targets of the last scheduled node; empty means the episode is over.
    pub fn successors(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.out_edges(self.last)
    }

    /// The successor node belonging to acquisition `acq`, if any.
    pub fn successor_for(&self, acq: usize) -> Option<NodeId> {
        self.successors().find(|&v| self.nodes[v].acq == Some(acq))
    }

    pub fn is_terminal(&self) -> bool {
        self.successors().next().is_none()
    }

    pub fn out_edges(&self, id: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.out[id].iter().map(|&v| v as usize).filter(|&v| self.alive[v])
    }

    /// All live edges as `(source, target)`.
    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.live_nodes().flat_map(move |u| self.out_edges(u).map(move |v| (u, v)))
    }

    pub fn live_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.nodes.len()).filter(|&id| self.alive[id])
    }

    pub fn node(&self, id: NodeId) -> &DiscreteNode {
        &self.nodes[id]
    }

    pub fn is_alive(&self, id: NodeId) -> bool {
        self.alive[id]
    }

    /// Every node ever created for `acq`, live or not.
    pub fn nodes_of(&self, acq: usize) -> Range<NodeId> {
        self.by_acq[acq].clone()
    }

    pub fn live_count_of(&self, acq: usize) -> usize {
        self.by_acq[acq].clone().filter(|&id| self.alive[id]).count()
    }

    pub fn last_scheduled(&self) -> NodeId {
        self.last
    }

    pub fn scheduled(&self) -> &[NodeId] {
        &self.scheduled
    }

    pub fn is_scheduled(&self, acq: usize) -> bool {
        self.scheduled.iter().any(|&id| self.nodes[id].acq == Some(acq))
    }

    pub fn pruned_edges(&self) -> &[PrunedEdge] {
        &self.pruned
    }

    pub fn acquisition_count(&self) -> usize {
        self.by_acq.len()
    }

    /// Total node count including deleted ones.
    pub fn capacity(&self) -> usize {
        self.nodes.len()
    }

    pub fn stats(&self) -> GraphStats {
        GraphStats {
            nodes: self.live_nodes,
            edges: self.edges().count(),
            per_acquisition: (0..self.by_acq.len()).map(|a| self.live_count_of(a)).collect(),
        }
    }

    /// Reachability from the origin over live edges.
    pub fn reachable_from_origin(&self) -> Vec<bool> {
        let mut reached = vec![false; self.nodes.len()];
        reached[ORIGIN] = true;
        let mut queue = VecDeque::from([ORIGIN]);
        while let Some(u) = queue.pop_front() {
            for v in self.out_edges(u) {
                if !reached[v] {
                    reached[v] = true;
                    queue.push_back(v);
                }
            }
        }
        reached
    }

    /// Checks the structural invariants; returns a description of the first failure.
    pub fn check_invariants(&self, inst: &Instance) -> std::result::Result<(), String> {
        let model = &inst.model;
        let delta = model.delta;
        for u in self.live_nodes() {
            let nu = &self.nodes[u];
            if let Some(i) = nu.acq {
                let a = &inst.acquisitions[i];
                if nu.start < a.e || nu.start > a.latest_start() {
                    return Err(format!("node {u} starts outside its window"));
                }
            }
            let mut seen = Vec::new();
            for v in self.out_edges(u) {
                let nv = &self.nodes[v];
                let Some(j) = nv.acq else {
                    return Err(format!("edge {u} -> origin"));
                };
                if nu.acq == Some(j) {
                    return Err(format!("edge {u} -> {v} within acquisition {j}"));
                }
                if seen.contains(&j) {
                    return Err(format!("node {u} has two edges to acquisition {j}"));
                }
                seen.push(j);
                let aj = &inst.acquisitions[j];
                let depart = match nu.acq {
                    None => origin_transition_duration(aj, model),
                    Some(i) => {
                        let ai = &inst.acquisitions[i];
                        ready_time(ai, nu.start, aj, model)
                    }
                };
                let end = nu.start + nu.acq.map_or(0.0, |i| inst.acquisitions[i].duration);
                if !(nv.start >= depart && nv.start >= aj.e && nv.start <= aj.latest_start()) {
                    return Err(format!("edge {u} -> {v} violates the transition inequality"));
                }
                if !(nv.start > end) {
                    return Err(format!("edge {u} -> {v} does not move forward in time"));
                }
                let prev = (nv.slot - 1) as f64 * delta;
                // Only edges the builder created are minimal; the scheduled
                // chain keeps the builder's edges so the check holds there too.
                if prev >= depart && prev >= aj.e {
                    return Err(format!("edge {u} -> {v} is not the earliest grid start"));
                }
            }
        }
        let reached = self.reachable_from_origin();
        if let Some(u) = self.live_nodes().find(|&u| !reached[u]) {
            return Err(format!("live node {u} is unreachable from the origin"));
        }
        Ok(())
    }

    pub fn dump(&self) -> GraphDump {
        let live: Vec<NodeId> = self.live_nodes().collect();
        let mut index = vec![usize::MAX; self.nodes.len()];
        for (k, &id) in live.iter().enumerate() {
            index[id] = k;
        }
        GraphDump {
            nodes: live
                .iter()
                .map(|&id| DumpNode {
                    acq: self.nodes[id].acq.map_or(-1, |a| a as i64),
                    t: self.nodes[id].start,
                })
                .collect(),
            edges: self.edges().map(|(u, v)| [index[u], index[v]]).collect(),
        }
    }
}

/// Debug view of the live graph; the origin has `acq = -1`.
#[derive(Debug, Serialize)]
pub struct GraphDump {
    pub nodes: Vec<DumpNode>,
    pub edges: Vec<[usize; 2]>,
}

#[derive(Debug, Serialize)]
pub struct DumpNode {
    pub acq: i64,
    pub t: f64,
}

/// Decides whether an edge survives pruning; used to re-verify witnesses.
///
/// Returns the first `(k, t_k)` in (lowest `k`, earliest `t_k`) order that fits
/// strictly between `source` and `target`. Only acquisitions that cannot have
/// been scheduled before `source` qualify: such a `k` could already lie on the
/// path leading to `source`, and removing the edge would then cut the only
/// continuation towards `target`.
pub fn prune_edge(
    inst: &Instance,
    source: &DiscreteNode,
    target: &DiscreteNode,
) -> Option<(usize, f64)> {
    let model = &inst.model;
    let j = target.acq?;
    let aj = &inst.acquisitions[j];
    for ak in &inst.acquisitions {
        let k = ak.id;
        if Some(k) == source.acq || k == j || may_precede(inst, k, source) {
            continue;
        }
        let depart = match source.acq {
            None => origin_transition_duration(ak, model),
            Some(i) => {
                let ai = &inst.acquisitions[i];
                ready_time(ai, source.start, ak, model)
            }
        };
        let lo = grid_ceil(depart.max(ak.e), model.delta);
        let hi = grid_floor(ak.latest_start(), model.delta);
        for s in lo..=hi {
            let t_k = s as f64 * model.delta;
            if t_k + ak.duration + transition_unchecked(ak, t_k, aj, model) <= target.start {
                return Some((k, t_k));
            }
        }
    }
    None
}

/// Whether acquisition `k` could be scheduled before `source` on some path.
pub fn may_precede(inst: &Instance, k: usize, source: &DiscreteNode) -> bool {
    if source.acq.is_none() {
        return false;
    }
    let m = &inst.model;
    let ak = &inst.acquisitions[k];
    grid_ceil(ak.e, m.delta) as f64 * m.delta + ak.duration + m.settle <= source.start
}
