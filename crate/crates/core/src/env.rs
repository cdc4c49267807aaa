//! Sequential decision process over the discrete graph.
//!
//! The state is the discrete graph; the agent sees the continuous
//! observation, picks one masked-in acquisition, and that acquisition is
//! scheduled at its earliest grid start after the last scheduled node. The
//! reward is the acquisition's utility divided by the instance's mean utility.

use std::sync::Arc;

use serde::Serialize;

use crate::continuous_graph::{derive_with_table, ContinuousObservation, FeatureTable};
use crate::discrete_graph::DiscreteGraph;
use crate::error::{Error, Result};
use crate::instance::Instance;
use crate::schedule::Schedule;

/// Outcome of one [`Env::step`].
#[derive(Debug, Clone)]
pub struct StepResult {
    pub observation: Arc<ContinuousObservation>,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepInfo {
    pub scheduled_id: usize,
    pub start_time: f64,
}

/// Running totals of an episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpisodeScore {
    pub utility: f64,
    pub count: usize,
}

/// One line of the optional trajectory log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectoryRecord {
    pub acq_id: usize,
    pub start: f64,
    pub reward: f64,
    pub mask_size: usize,
}

#[derive(Debug)]
struct Initial {
    graph: DiscreteGraph,
    observation: Arc<ContinuousObservation>,
}

/// A single-threaded environment bound to one instance.
///
/// The initial graph is built once; [`Env::restart`] reuses it.
#[derive(Debug, Clone)]
pub struct Env {
    instance: Arc<Instance>,
    table: Arc<FeatureTable>,
    initial: Arc<Initial>,
    graph: DiscreteGraph,
    observation: Arc<ContinuousObservation>,
    cumulative_utility: f64,
    step_count: usize,
    mean_utility: f64,
    trajectory: Vec<TrajectoryRecord>,
}

impl Env {
    /// Builds the graphs of `inst` and returns the initial state.
    pub fn reset(inst: impl Into<Arc<Instance>>) -> Env {
        let instance = inst.into();
        let table = Arc::new(FeatureTable::new(&instance));
        let graph = DiscreteGraph::build(&instance);
        let observation = Arc::new(derive_with_table(&graph, &table));
        let initial = Arc::new(Initial {
            graph: graph.clone(),
            observation: observation.clone(),
        });
        let mean_utility = instance.mean_utility();
        Env {
            instance,
            table,
            initial,
            graph,
            observation,
            cumulative_utility: 0.0,
            step_count: 0,
            mean_utility,
            trajectory: Vec::new(),
        }
    }

    /// Returns to the initial state without rebuilding the graph.
    pub fn restart(&mut self) {
        self.graph = self.initial.graph.clone();
        self.observation = self.initial.observation.clone();
        self.cumulative_utility = 0.0;
        self.step_count = 0;
        self.trajectory.clear();
    }

    /// Schedules acquisition `action`, which must be in the action mask.
    pub fn step(&mut self, action: usize) -> Result<StepResult> {
        let node = self.graph.successor_for(action).ok_or_else(|| {
            Error::Contract(format!("acquisition {action} is masked out at step {}", self.step_count))
        })?;
        let mask_size = self.graph.successors().count();
        self.graph.apply_schedule_step(node)?;
        let start_time = self.graph.node(node).start;
        let utility = self.instance.acquisitions[action].utility;
        self.cumulative_utility += utility;
        self.step_count += 1;
        let reward = utility / self.mean_utility;
        self.observation = Arc::new(derive_with_table(&self.graph, &self.table));
        self.trajectory.push(TrajectoryRecord {
            acq_id: action,
            start: start_time,
            reward,
            mask_size,
        });
        Ok(StepResult {
            observation: self.observation.clone(),
            reward,
            done: self.graph.is_terminal(),
            info: StepInfo {
                scheduled_id: action,
                start_time,
            },
        })
    }

    pub fn observation(&self) -> &Arc<ContinuousObservation> {
        &self.observation
    }

    pub fn graph(&self) -> &DiscreteGraph {
        &self.graph
    }

    pub fn instance(&self) -> &Arc<Instance> {
        &self.instance
    }

    pub fn is_done(&self) -> bool {
        self.graph.is_terminal()
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    /// Mean utility over all candidates, fixed at reset.
    pub fn mean_utility(&self) -> f64 {
        self.mean_utility
    }

    pub fn score(&self) -> EpisodeScore {
        EpisodeScore {
            utility: self.cumulative_utility,
            count: self.graph.scheduled().len(),
        }
    }

    /// Schedule induced by the scheduled nodes.
    pub fn schedule(&self) -> Schedule {
        self.graph
            .scheduled()
            .iter()
            .map(|&id| {
                let n = self.graph.node(id);
                (n.acq.expect("scheduled nodes are acquisitions"), n.start)
            })
            .collect()
    }

    pub fn trajectory(&self) -> &[TrajectoryRecord] {
        &self.trajectory
    }
}

/// Free-function form of [`Env::score`].
pub fn episode_score(env: &Env) -> EpisodeScore {
    env.score()
}
