//! Compact one-node-per-acquisition view of the discrete graph, with node
//! features and the action mask handed to the policy.

use serde::Serialize;

use crate::discrete_graph::DiscreteGraph;
use crate::instance::{Instance, MAX_ROLL};

/// Length of [`NodeFeatures::to_array`].
pub const FEATURE_DIM: usize = 14;

/// Where an acquisition stands in the partial schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    LastScheduled,
    Scheduled,
    AvailableNow,
    FutureCandidate,
}

impl NodeStatus {
    fn one_hot(self) -> [f64; 4] {
        let mut v = [0.0; 4];
        v[self as usize] = 1.0;
        v
    }
}

/// Per-node attributes; times are divided by the horizon, pitches by the
/// model's pitch limit, roll by [`MAX_ROLL`] and utility by the mean utility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NodeFeatures {
    pub e: f64,
    pub l: f64,
    pub d: f64,
    pub pitch_min: f64,
    pub pitch_max: f64,
    pub pitch_mean: f64,
    pub roll_min: f64,
    pub roll_max: f64,
    pub roll_mean: f64,
    pub utility_norm: f64,
    pub status: NodeStatus,
}

impl NodeFeatures {
    pub fn to_array(&self) -> [f64; FEATURE_DIM] {
        let s = self.status.one_hot();
        [
            self.e,
            self.l,
            self.d,
            self.pitch_min,
            self.pitch_max,
            self.pitch_mean,
            self.roll_min,
            self.roll_max,
            self.roll_mean,
            self.utility_norm,
            s[0],
            s[1],
            s[2],
            s[3],
        ]
    }
}

/// Static part of the features, computed once per instance.
#[derive(Debug, Clone)]
pub struct FeatureTable {
    rows: Vec<NodeFeatures>,
}

impl FeatureTable {
    pub fn new(inst: &Instance) -> Self {
        let m = &inst.model;
        let mean_u = inst.mean_utility();
        let rows = inst
            .acquisitions
            .iter()
            .map(|a| {
                // Pitch decreases linearly in time, so extremes sit at the window ends.
                let p_hi = m.kappa_p * (a.x - a.e);
                let p_lo = m.kappa_p * (a.x - a.l);
                let p_mean = m.kappa_p * (a.x - 0.5 * (a.e + a.l));
                let roll = a.roll / MAX_ROLL;
                NodeFeatures {
                    e: a.e / m.tau,
                    l: a.l / m.tau,
                    d: a.duration / m.tau,
                    pitch_min: p_lo / m.pitch_max,
                    pitch_max: p_hi / m.pitch_max,
                    pitch_mean: p_mean / m.pitch_max,
                    roll_min: roll,
                    roll_max: roll,
                    roll_mean: roll,
                    utility_norm: a.utility / mean_u,
                    status: NodeStatus::FutureCandidate,
                }
            })
            .collect();
        FeatureTable { rows }
    }

    pub fn features(&self, acq: usize, status: NodeStatus) -> NodeFeatures {
        NodeFeatures {
            status,
            ..self.rows[acq]
        }
    }
}

/// What the learner sees: acquisitions (ascending id), their features,
/// projected precedence edges and the action mask.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContinuousObservation {
    pub nodes: Vec<usize>,
    pub features: Vec<NodeFeatures>,
    /// Directed precedence edges as positions into `nodes`.
    pub edges: Vec<(usize, usize)>,
    pub mask: Vec<bool>,
}

impl ContinuousObservation {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn position_of(&self, acq: usize) -> Option<usize> {
        self.nodes.binary_search(&acq).ok()
    }

    /// Ids of the acquisitions that may be scheduled next.
    pub fn available(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn has_action(&self) -> bool {
        self.mask.iter().any(|&m| m)
    }

    /// Edges as acquisition-id pairs.
    pub fn edge_ids(&self) -> Vec<(usize, usize)> {
        self.edges.iter().map(|&(i, j)| (self.nodes[i], self.nodes[j])).collect()
    }

    /// Row-major `len() x FEATURE_DIM` feature matrix.
    pub fn feature_matrix(&self) -> Vec<f64> {
        self.features.iter().flat_map(|f| f.to_array()).collect()
    }

    /// Reorders nodes so that new position `k` holds old node `perm[k]`.
    ///
    /// The result no longer has ascending ids; it exists to probe the
    /// network's behavior under relabeling.
    pub fn permuted(&self, perm: &[usize]) -> ContinuousObservation {
        let mut inverse = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        ContinuousObservation {
            nodes: perm.iter().map(|&o| self.nodes[o]).collect(),
            features: perm.iter().map(|&o| self.features[o]).collect(),
            edges: self.edges.iter().map(|&(i, j)| (inverse[i], inverse[j])).collect(),
            mask: perm.iter().map(|&o| self.mask[o]).collect(),
        }
    }

    pub fn dump(&self) -> ObservationDump {
        ObservationDump {
            nodes: self
                .nodes
                .iter()
                .zip(&self.features)
                .zip(&self.mask)
                .map(|((&id, f), &mask)| DumpNode {
                    id,
                    features: f.to_array().to_vec(),
                    mask,
                })
                .collect(),
            edges: self.edge_ids().into_iter().map(|(i, j)| [i, j]).collect(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ObservationDump {
    pub nodes: Vec<DumpNode>,
    pub edges: Vec<[usize; 2]>,
}

#[derive(Debug, Serialize)]
pub struct DumpNode {
    pub id: usize,
    pub features: Vec<f64>,
    pub mask: bool,
}

/// Projects the discrete graph onto acquisitions.
pub fn derive_continuous_graph(g: &DiscreteGraph, inst: &Instance) -> ContinuousObservation {
    derive_with_table(g, &FeatureTable::new(inst))
}

/// Same as [`derive_continuous_graph`] with precomputed static features.
pub fn derive_with_table(g: &DiscreteGraph, table: &FeatureTable) -> ContinuousObservation {
    let n = g.acquisition_count();
    let mut status = vec![None; n];
    for a in 0..n {
        if g.live_count_of(a) > 0 {
            status[a] = Some(NodeStatus::FutureCandidate);
        }
    }
    for &id in g.scheduled() {
        if let Some(a) = g.node(id).acq {
            status[a] = Some(NodeStatus::Scheduled);
        }
    }
    if let Some(a) = g.node(g.last_scheduled()).acq {
        status[a] = Some(NodeStatus::LastScheduled);
    }
    let mut mask_of = vec![false; n];
    for v in g.successors() {
        let a = g.node(v).acq.expect("successors are acquisitions");
        mask_of[a] = true;
        status[a] = Some(NodeStatus::AvailableNow);
    }

    let mut position = vec![usize::MAX; n];
    let mut nodes = Vec::new();
    let mut features = Vec::new();
    let mut mask = Vec::new();
    for (a, st) in status.iter().enumerate() {
        if let Some(st) = *st {
            position[a] = nodes.len();
            nodes.push(a);
            features.push(table.features(a, st));
            mask.push(mask_of[a]);
        }
    }

    let mut edges: Vec<(usize, usize)> = g
        .edges()
        .filter_map(|(u, v)| {
            let i = g.node(u).acq?;
            let j = g.node(v).acq?;
            Some((position[i], position[j]))
        })
        .collect();
    edges.sort_unstable();
    edges.dedup();

    ContinuousObservation {
        nodes,
        features,
        edges,
        mask,
    }
}

/// Problem size of an instance before any step.
///
/// Discrete counts include the origin; ratios are rounded to the nearest integer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SizeRow {
    pub acquisitions: usize,
    pub discrete_nodes: usize,
    pub continuous_nodes: usize,
    pub node_ratio: u64,
    pub discrete_edges: usize,
    pub continuous_edges: usize,
    pub edge_ratio: u64,
}

impl SizeRow {
    pub fn new(g: &DiscreteGraph, obs: &ContinuousObservation) -> Self {
        let stats = g.stats();
        let ratio = |a: usize, b: usize| if b == 0 { 0 } else { (a as f64 / b as f64).round() as u64 };
        SizeRow {
            acquisitions: g.acquisition_count(),
            discrete_nodes: stats.nodes,
            continuous_nodes: obs.len(),
            node_ratio: ratio(stats.nodes, obs.len()),
            discrete_edges: stats.edges,
            continuous_edges: obs.edges.len(),
            edge_ratio: ratio(stats.edges, obs.edges.len()),
        }
    }
}

/// Builds both graphs of `inst` and counts them.
pub fn size_row(inst: &Instance) -> SizeRow {
    let g = DiscreteGraph::build(inst);
    let obs = derive_continuous_graph(&g, inst);
    SizeRow::new(&g, &obs)
}

/// Re-derives the observation after a scheduling step.
pub fn refresh_after_step(
    _previous: &ContinuousObservation,
    g: &DiscreteGraph,
    table: &FeatureTable,
) -> ContinuousObservation {
    derive_with_table(g, table)
}

/// Features of one acquisition in the current state.
pub fn compute_node_features(inst: &Instance, g: &DiscreteGraph, acq: usize) -> Option<NodeFeatures> {
    let obs = derive_continuous_graph(g, inst);
    obs.position_of(acq).map(|p| obs.features[p])
}
