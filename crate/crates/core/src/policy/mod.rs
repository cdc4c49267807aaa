//! Actor-critic graph attention network over continuous observations.
//!
//! The observation graph is rewired with reverse edges, a pooling node
//! (index `n`, after the `n` acquisition nodes) linked both ways to every
//! node, and self-loops. Node features pass through a two-layer embedder and
//! edges start from a learned embedding of their type. Each layer runs
//! multi-head attention whose messages also update the edge states; both are
//! added residually. The actor scores every acquisition node from its states
//! at all depths together with the pooling node's states; the critic reads
//! the pooling node only.

mod params;

use std::rc::Rc;
use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::autodiff::{Matrix, Tape, Var};
use crate::continuous_graph::{ContinuousObservation, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::instance::Instance;
use crate::solvers::{Algorithm, SolverReport};

pub use params::{NetworkConfig, ParameterSet, CHECKPOINT_VERSION, EDGE_TYPES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeType {
    Precedence = 0,
    ReversePrecedence = 1,
    Pool = 2,
    SelfLoop = 3,
}

/// Observation graph prepared for message passing.
///
/// Edge `e` carries information from `src[e]` to `dst[e]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewiredGraph {
    /// Acquisition nodes; the pooling node has index `n`.
    pub n: usize,
    pub src: Rc<[u32]>,
    pub dst: Rc<[u32]>,
    pub kind: Vec<EdgeType>,
}

impl RewiredGraph {
    pub fn node_count(&self) -> usize {
        self.n + 1
    }

    pub fn edge_count(&self) -> usize {
        self.kind.len()
    }

    pub fn count(&self, kind: EdgeType) -> usize {
        self.kind.iter().filter(|&&k| k == kind).count()
    }
}

/// Adds reverse edges, the pooling node and self-loops; node order is kept.
pub fn rewire(obs: &ContinuousObservation) -> RewiredGraph {
    let n = obs.len();
    let pool = n as u32;
    let mut src = Vec::with_capacity(2 * obs.edges.len() + 3 * n + 1);
    let mut dst = Vec::with_capacity(src.capacity());
    let mut kind = Vec::with_capacity(src.capacity());
    let mut push = |s: u32, d: u32, k: EdgeType| {
        src.push(s);
        dst.push(d);
        kind.push(k);
    };
    for &(i, j) in &obs.edges {
        push(i as u32, j as u32, EdgeType::Precedence);
    }
    for &(i, j) in &obs.edges {
        push(j as u32, i as u32, EdgeType::ReversePrecedence);
    }
    for i in 0..pool {
        push(i, pool, EdgeType::Pool);
    }
    for i in 0..pool {
        push(pool, i, EdgeType::Pool);
    }
    for i in 0..=pool {
        push(i, i, EdgeType::SelfLoop);
    }
    RewiredGraph {
        n,
        src: src.into(),
        dst: dst.into(),
        kind,
    }
}

/// Tape handles of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// `n x 1` action scores, one per acquisition node.
    pub logits: Var,
    /// `1 x 1` state value.
    pub value: Var,
    /// Node states `(n + 1) x H` after the embedder and after each layer.
    pub node_states: Vec<Var>,
    pub edge_states: Vec<Var>,
}

fn ffn(t: &mut Tape, x: Var, slots: [usize; 4]) -> Var {
    let [w1, b1, w2, b2] = slots.map(Var::Param);
    let a = t.matmul(x, w1);
    let a = t.add_row(a, b1);
    let a = t.tanh(a);
    let a = t.matmul(a, w2);
    t.add_row(a, b2)
}

fn check_finite(t: &Tape, vars: &[Var], what: &str) -> Result<()> {
    if vars.iter().all(|&v| t.value(v).is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Records the network on `tape`, whose leaves must be `params.tensors()`.
pub fn forward_on_tape(
    tape: &mut Tape,
    params: &ParameterSet,
    obs: &ContinuousObservation,
    graph: &RewiredGraph,
) -> Result<ForwardVars> {
    let n = obs.len();
    if n == 0 {
        return Err(Error::Contract("the network needs at least one acquisition node".into()));
    }
    let cfg = params.config();
    let h_dim = cfg.hidden_dim;
    let heads = cfg.n_heads;
    let layout = params.layout();
    let rows = n + 1;

    let mut x = obs.feature_matrix();
    x.resize(rows * FEATURE_DIM, 0.0);
    let x = tape.constant(Matrix::from_vec(rows, FEATURE_DIM, x));
    let mut h = ffn(tape, x, layout.embed);
    let kinds: Rc<[u32]> = graph.kind.iter().map(|&k| k as u32).collect();
    let mut f = tape.gather(Var::Param(layout.edge_type), kinds);
    check_finite(tape, &[h, f], "embedding")?;

    let mut node_states = vec![h];
    let mut edge_states = vec![f];
    for (l, slots) in layout.layers.iter().enumerate() {
        let attn = Var::Param(slots.attn);
        let from_src = tape.matmul_rows(h, attn, 0);
        let from_edge = tape.matmul_rows(f, attn, h_dim);
        let from_dst = tape.matmul_rows(h, attn, 2 * h_dim);
        let m = tape.edge_message(
            from_src,
            from_edge,
            from_dst,
            Var::Param(slots.attn_bias),
            graph.src.clone(),
            graph.dst.clone(),
        );

        let act = tape.leaky_relu(m, cfg.leaky_slope);
        let score = tape.head_dot(act, Var::Param(slots.attn_score), heads);
        let alpha = tape.segment_softmax(score, graph.dst.clone(), rows);

        let v = tape.matmul(h, Var::Param(slots.value));
        let agg = tape.attend(v, alpha, graph.src.clone(), graph.dst.clone(), rows);

        let dh = ffn(tape, agg, slots.node_ffn);
        h = tape.add(h, dh);
        // Edge states after the last layer feed nothing, so skip that update.
        if l + 1 < cfg.n_layers {
            let df = ffn(tape, m, slots.edge_ffn);
            f = tape.add(f, df);
        }
        check_finite(tape, &[h, f], &format!("layer {l}"))?;
        node_states.push(h);
        edge_states.push(f);
    }

    let depth = (cfg.n_layers + 1) * h_dim;
    let stacked = tape.concat(&node_states);
    let per_node = tape.matmul_rows(stacked, Var::Param(layout.actor_w), 0);
    let first_n: Rc<[u32]> = (0..n as u32).collect();
    let per_node = tape.gather(per_node, first_n);
    let global = tape.gather(stacked, vec![n as u32].into());
    let global_score = tape.matmul_rows(global, Var::Param(layout.actor_w), depth);
    let logits = tape.add_row(per_node, global_score);
    let logits = tape.add_row(logits, Var::Param(layout.actor_b));
    let value = tape.matmul(global, Var::Param(layout.critic_w));
    let value = tape.add_row(value, Var::Param(layout.critic_b));
    check_finite(tape, &[logits, value], "output heads")?;

    Ok(ForwardVars {
        logits,
        value,
        node_states,
        edge_states,
    })
}

/// Network outputs for one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// One score per observation node, in observation order.
    pub logits: Vec<f64>,
    pub value: f64,
}

/// Runs the network without keeping the tape.
pub fn evaluate(params: &ParameterSet, obs: &ContinuousObservation) -> Result<Evaluation> {
    let graph = rewire(obs);
    let mut tape = Tape::new(params.tensors());
    let out = forward_on_tape(&mut tape, params, obs, &graph)?;
    Ok(Evaluation {
        logits: tape.value(out.logits).data.clone(),
        value: tape.value(out.value).data[0],
    })
}

/// Log-probabilities under the action mask; masked entries are `-inf`.
pub fn masked_log_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Contract("action mask has no feasible entry".into()));
    }
    let log_z = max
        + logits
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&l, _)| (l - max).exp())
            .sum::<f64>()
            .ln();
    Ok(logits
        .iter()
        .zip(mask)
        .map(|(&l, &m)| if m { l - log_z } else { f64::NEG_INFINITY })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Sample,
    /// Highest probability; ties go to the lowest acquisition id.
    Argmax,
}

/// A chosen action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action {
    pub acq_id: usize,
    /// Index into the observation's node list.
    pub position: usize,
    pub log_prob: f64,
}

/// Picks an action from masked logits.
pub fn sample_action<R: Rng + ?Sized>(
    obs: &ContinuousObservation,
    logits: &[f64],
    mode: SampleMode,
    rng: &mut R,
) -> Result<Action> {
    let logp = masked_log_softmax(logits, &obs.mask)?;
    let feasible = || (0..logp.len()).filter(|&i| obs.mask[i]);
    let position = match mode {
        SampleMode::Argmax => feasible()
            .reduce(|best, i| {
                let better = logp[i] > logp[best] || (logp[i] == logp[best] && obs.nodes[i] < obs.nodes[best]);
                if better {
                    i
                } else {
                    best
                }
            })
            .expect("mask checked non-empty"),
        SampleMode::Sample => {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = None;
            for i in feasible() {
                acc += logp[i].exp();
                pick = Some(i);
                if u < acc {
                    break;
                }
            }
            pick.expect("mask checked non-empty")
        }
    };
    Ok(Action {
        acq_id: obs.nodes[position],
        position,
        log_prob: logp[position],
    })
}

/// Runs a full episode with the policy and returns the environment.
pub fn rollout_policy(
    params: &ParameterSet,
    env: &mut crate::env::Env,
    mode: SampleMode,
    rng: &mut impl Rng,
) -> Result<()> {
    while !env.is_done() {
        let obs = env.observation().clone();
        let out = evaluate(params, &obs)?;
        let action = sample_action(&obs, &out.logits, mode, rng)?;
        env.step(action.acq_id)?;
    }
    Ok(())
}

/// Schedules `inst` with the argmax policy.
pub fn policy_schedule(params: &ParameterSet, inst: &Instance) -> Result<SolverReport> {
    let started = Instant::now();
    let mut env = crate::env::Env::reset(inst.clone());
    rollout_policy(params, &mut env, SampleMode::Argmax, &mut rand::rngs::mock::StepRng::new(0, 0))?;
    let schedule = env.schedule();
    Ok(SolverReport::new(inst, schedule, Algorithm::Policy, started.elapsed().as_secs_f64()))
}

/// Gradient of `seeds` with respect to every parameter array.
///
/// `dlogits` has one entry per observation node.
pub fn gradients(
    params: &ParameterSet,
    obs: &ContinuousObservation,
    dlogits: &[f64],
    dvalue: f64,
) -> Result<Vec<Matrix>> {
    let mut grads = params.zeros_like();
    accumulate_gradients(params, obs, dlogits, dvalue, &mut grads)?;
    check_gradients(params, &grads)?;
    Ok(grads)
}

/// Adds the gradient of `dlogits . logits + dvalue * value` into `grads`.
pub fn accumulate_gradients(
    params: &ParameterSet,
    obs: &ContinuousObservation,
    dlogits: &[f64],
    dvalue: f64,
    grads: &mut [Matrix],
) -> Result<Evaluation> {
    let graph = rewire(obs);
    let mut tape = Tape::new(params.tensors());
    let out = forward_on_tape(&mut tape, params, obs, &graph)?;
    let eval = Evaluation {
        logits: tape.value(out.logits).data.clone(),
        value: tape.value(out.value).data[0],
    };
    tape.backward(
        &[
            (out.logits, Matrix::from_vec(dlogits.len(), 1, dlogits.to_vec())),
            (out.value, Matrix::from_vec(1, 1, vec![dvalue])),
        ],
        grads,
    );
    Ok(eval)
}

/// Fails with the name of the first parameter whose gradient is not finite.
pub fn check_gradients(params: &ParameterSet, grads: &[Matrix]) -> Result<()> {
    match grads.iter().position(|g| !g.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("gradient of `{}`", params.names()[i]))),
        None => Ok(()),
    }
}
