//! Proximal policy optimization with action masking.
//!
//! Rollouts run the sampling policy to terminal states, advantages come from
//! generalized advantage estimation, and updates minimize the clipped
//! surrogate plus a value loss minus an entropy bonus. Gradients of the loss
//! with respect to logits and value are closed-form and then pulled back
//! through the network by [`crate::policy::accumulate_gradients`].

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::continuous_graph::ContinuousObservation;
use crate::env::Env;
use crate::error::{Error, Result};
use crate::instance::Instance;
use crate::policy::{
    accumulate_gradients, check_gradients, evaluate, masked_log_softmax, sample_action, NetworkConfig,
    ParameterSet, SampleMode,
};

mod report;

pub use report::{
    evaluate_instance, evaluate_policy, write_eval_report, EvalReport, EvalRow, EvalSummary, ReportFormat, WinTieLoss,
};

/// Optimization settings. Every field may be overridden from a config file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub gae_lambda: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub learning_rate: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub episodes_per_batch: usize,
    pub max_grad_norm: f64,
    /// Training stops once this many environment steps were collected.
    pub total_env_steps: usize,
    /// Evaluate every this many updates.
    pub eval_interval: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip_eps: 0.2,
            gae_lambda: 0.95,
            gamma: 1.0,
            epochs: 3,
            minibatch_size: 64,
            learning_rate: 3e-4,
            value_coef: 0.5,
            entropy_coef: 0.01,
            episodes_per_batch: 16,
            max_grad_norm: 0.5,
            total_env_steps: 50_000,
            eval_interval: 5,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.clip_eps > 0.0) {
            return bad(format!("clip_eps must be positive, got {}", self.clip_eps));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad(format!("gae_lambda must lie in [0, 1], got {}", self.gae_lambda));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if self.epochs == 0 || self.minibatch_size == 0 || self.episodes_per_batch == 0 || self.eval_interval == 0 {
            return bad("epochs, minibatch_size, episodes_per_batch and eval_interval must be positive".into());
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("value_coef", self.value_coef),
            ("entropy_coef", self.entropy_coef),
            ("max_grad_norm", self.max_grad_norm),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

/// Everything a training run needs besides its instances.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub ppo: PpoConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.ppo.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text).map_err(|source| Error::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One decision taken while collecting experience.
#[derive(Debug, Clone)]
pub struct Transition {
    /// Observation the action was taken from, mask included.
    pub obs: Arc<ContinuousObservation>,
    /// Index of the chosen node within `obs`.
    pub position: usize,
    pub acq_id: usize,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
}

/// Summary of one finished episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpisodeRecord {
    /// Index of the environment that produced it.
    pub env_index: usize,
    /// Sum of scaled rewards.
    pub ret: f64,
    pub utility: f64,
    pub count: usize,
    pub mean_utility: f64,
    pub length: usize,
}

/// Transitions of whole episodes, stored back to back.
#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub transitions: Vec<Transition>,
    pub episodes: Vec<EpisodeRecord>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn mean_return(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().map(|e| e.ret).sum::<f64>() / self.episodes.len() as f64
    }
}

/// Runs `episodes` complete episodes, each on an environment drawn uniformly from `envs`.
pub fn collect_rollouts<R: Rng + ?Sized>(
    envs: &mut [Env],
    params: &ParameterSet,
    episodes: usize,
    mode: SampleMode,
    rng: &mut R,
) -> Result<RolloutBuffer> {
    if envs.is_empty() {
        return Err(Error::InvalidArgument("rollouts need at least one environment".into()));
    }
    let mut buffer = RolloutBuffer::default();
    for _ in 0..episodes {
        let env_index = if envs.len() == 1 { 0 } else { rng.gen_range(0..envs.len()) };
        let env = &mut envs[env_index];
        env.restart();
        let first = buffer.transitions.len();
        let mut ret = 0.0;
        while !env.is_done() {
            let obs = env.observation().clone();
            let out = evaluate(params, &obs)?;
            let action = sample_action(&obs, &out.logits, mode, rng)?;
            let step = env.step(action.acq_id)?;
            ret += step.reward;
            buffer.transitions.push(Transition {
                obs,
                position: action.position,
                acq_id: action.acq_id,
                log_prob: action.log_prob,
                value: out.value,
                reward: step.reward,
                done: step.done,
            });
        }
        let score = env.score();
        buffer.episodes.push(EpisodeRecord {
            env_index,
            ret,
            utility: score.utility,
            count: score.count,
            mean_utility: env.mean_utility(),
            length: buffer.transitions.len() - first,
        });
    }
    Ok(buffer)
}

/// Generalized advantage estimates and returns-to-go.
///
/// The value after the last entry, and after any entry flagged done, is 0.
pub fn compute_gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    assert!(
        rewards.len() == values.len() && values.len() == dones.len(),
        "reward, value and done arrays must be aligned"
    );
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        adv[t] = delta + gamma * lambda * live * next_adv;
        next_adv = adv[t];
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Shifts and scales to mean 0 and standard deviation 1; the deviation is floored at `1e-8`.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
}

/// One training example for the surrogate loss.
#[derive(Debug, Clone)]
pub struct PpoSample {
    pub obs: Arc<ContinuousObservation>,
    pub position: usize,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub ret: f64,
}

/// Per-sample loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SampleLoss {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub ratio: f64,
    pub clipped: bool,
}

impl SampleLoss {
    pub fn total(&self, cfg: &PpoConfig) -> f64 {
        self.policy + cfg.value_coef * self.value - cfg.entropy_coef * self.entropy
    }
}

/// Loss of one sample from network outputs, with its gradient in logits and value.
pub fn sample_loss(
    logits: &[f64],
    value: f64,
    sample: &PpoSample,
    cfg: &PpoConfig,
) -> Result<(SampleLoss, Vec<f64>, f64)> {
    let mask = &sample.obs.mask;
    if !mask.get(sample.position).copied().unwrap_or(false) {
        return Err(Error::Contract(format!("sample action {} is masked out", sample.position)));
    }
    let logp = masked_log_softmax(logits, mask)?;
    let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    let entropy = -logp
        .iter()
        .zip(&probs)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((l, p), _)| p * l)
        .sum::<f64>();
    let a = sample.advantage;
    let ratio = (logp[sample.position] - sample.old_log_prob).exp();
    let clipped_ratio = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
    let unclipped_active = ratio * a <= clipped_ratio * a;
    let policy = -(ratio * a).min(clipped_ratio * a);
    let value_err = value - sample.ret;
    let loss = SampleLoss {
        policy,
        value: value_err * value_err,
        entropy,
        ratio,
        clipped: (ratio - clipped_ratio).abs() > 0.0,
    };
    // d(policy)/d(log p_a), zero when the clipped branch is the minimum.
    let dlogp = if unclipped_active { -ratio * a } else { 0.0 };
    let mut dlogits = vec![0.0; logits.len()];
    for j in 0..logits.len() {
        if !mask[j] {
            continue;
        }
        let onehot = if j == sample.position { 1.0 } else { 0.0 };
        let d_entropy = -probs[j] * (logp[j] + entropy);
        dlogits[j] = dlogp * (onehot - probs[j]) - cfg.entropy_coef * d_entropy;
    }
    let dvalue = 2.0 * cfg.value_coef * value_err;
    Ok((loss, dlogits, dvalue))
}

/// Mean loss terms over a minibatch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossStats {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub clip_frac: f64,
}

/// Mean loss over `batch` and, when `grads` is given, its gradient added into `grads`.
pub fn minibatch_loss(
    params: &ParameterSet,
    batch: &[PpoSample],
    cfg: &PpoConfig,
    mut grads: Option<&mut [Matrix]>,
) -> Result<LossStats> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty minibatch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut stats = LossStats::default();
    for sample in batch {
        let out = evaluate(params, &sample.obs)?;
        let (loss, mut dlogits, mut dvalue) = sample_loss(&out.logits, out.value, sample, cfg)?;
        if let Some(g) = grads.as_deref_mut() {
            dlogits.iter_mut().for_each(|d| *d *= scale);
            dvalue *= scale;
            accumulate_gradients(params, &sample.obs, &dlogits, dvalue, g)?;
        }
        stats.total += loss.total(cfg) * scale;
        stats.policy += loss.policy * scale;
        stats.value += loss.value * scale;
        stats.entropy += loss.entropy * scale;
        stats.clip_frac += if loss.clipped { scale } else { 0.0 };
    }
    if !stats.total.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(stats)
}

/// Adam optimizer state.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl Adam {
    pub fn new(params: &ParameterSet, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    /// Applies one step, then rounds the parameters to `f32` precision.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &[Matrix]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m.data[i] / c1;
                let v_hat = v.data[i] / c2;
                p.data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        params.round_to_f32();
    }
}

/// Euclidean norm over all gradient arrays.
pub fn global_norm(grads: &[Matrix]) -> f64 {
    grads.iter().flat_map(|g| &g.data).map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales `grads` down so that their global norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.data.iter_mut().for_each(|x| *x *= s));
    }
    norm
}

/// Averages over all minibatches of an update.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_frac: f64,
    pub grad_norm: f64,
}

/// Advantage-normalized samples built from a buffer.
pub fn prepare_samples(buffer: &RolloutBuffer, cfg: &PpoConfig) -> Vec<PpoSample> {
    let t = &buffer.transitions;
    let rewards: Vec<f64> = t.iter().map(|x| x.reward).collect();
    let values: Vec<f64> = t.iter().map(|x| x.value).collect();
    let dones: Vec<bool> = t.iter().map(|x| x.done).collect();
    let (mut adv, returns) = compute_gae(&rewards, &values, &dones, cfg.gamma, cfg.gae_lambda);
    normalize_advantages(&mut adv);
    t.iter()
        .zip(adv)
        .zip(returns)
        .map(|((x, advantage), ret)| PpoSample {
            obs: x.obs.clone(),
            position: x.position,
            old_log_prob: x.log_prob,
            advantage,
            ret,
        })
        .collect()
}

/// Runs all epochs of minibatch updates on one buffer.
///
/// A non-finite loss or gradient aborts the update and leaves the
/// parameters of the failing minibatch untouched.
pub fn ppo_update<R: Rng + ?Sized>(
    buffer: &RolloutBuffer,
    params: &mut ParameterSet,
    optimizer: &mut Adam,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<UpdateStats> {
    if buffer.is_empty() {
        return Err(Error::InvalidArgument("cannot update on an empty buffer".into()));
    }
    let samples = prepare_samples(buffer, cfg);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut stats = UpdateStats::default();
    let mut batches = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch_size) {
            let batch: Vec<PpoSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let mut grads = params.zeros_like();
            let loss = minibatch_loss(params, &batch, cfg, Some(&mut grads))?;
            check_gradients(params, &grads)?;
            let norm = clip_grad_norm(&mut grads, cfg.max_grad_norm);
            optimizer.step(params, &grads);
            stats.policy_loss += loss.policy;
            stats.value_loss += loss.value;
            stats.entropy += loss.entropy;
            stats.clip_frac += loss.clip_frac;
            stats.grad_norm += norm;
            batches += 1;
        }
    }
    let b = batches as f64;
    stats.policy_loss /= b;
    stats.value_loss /= b;
    stats.entropy /= b;
    stats.clip_frac /= b;
    stats.grad_norm /= b;
    Ok(stats)
}

/// One line of the training report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainRow {
    pub update: usize,
    pub env_steps: usize,
    pub mean_return: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_frac: f64,
    /// Mean over held-out instances of policy utility over mean candidate utility.
    pub eval_utility: Option<f64>,
    /// Mean of per-instance policy/greedy utility ratios.
    pub eval_vs_greedy: Option<f64>,
    pub eval_vs_ramp: Option<f64>,
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the highest recorded `eval_utility`, or the final ones without held-out instances.
    pub best: ParameterSet,
    /// Update index at which `best` was recorded, 0 for the initial parameters.
    pub best_update: usize,
    pub last: ParameterSet,
    pub rows: Vec<TrainRow>,
}

/// Alternates rollouts and updates until the step budget is spent.
///
/// `on_row` sees every report row as soon as it is produced.
pub fn train(
    train_set: &[Instance],
    eval_set: &[(String, Instance)],
    cfg: &TrainConfig,
    mut on_row: impl FnMut(&TrainRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one instance".into()));
    }
    let ppo = &cfg.ppo;
    let mut params = ParameterSet::init(cfg.network, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut envs: Vec<Env> = train_set.iter().cloned().map(Env::reset).collect();
    let mut optimizer = Adam::new(&params, ppo.learning_rate);
    let baselines = report::Baselines::compute(eval_set);

    let mut best = params.clone();
    let mut best_update = 0;
    let mut best_score = f64::NEG_INFINITY;
    let mut rows = Vec::new();
    let mut env_steps = 0usize;
    let mut update = 0usize;
    while env_steps < ppo.total_env_steps {
        let buffer = collect_rollouts(&mut envs, &params, ppo.episodes_per_batch, SampleMode::Sample, &mut rng)?;
        env_steps += buffer.len();
        if buffer.is_empty() {
            return Err(Error::InvalidArgument(
                "no training instance offers any feasible acquisition".into(),
            ));
        }
        let stats = ppo_update(&buffer, &mut params, &mut optimizer, ppo, &mut rng)?;
        update += 1;
        let finished = env_steps >= ppo.total_env_steps;
        let mut row = TrainRow {
            update,
            env_steps,
            mean_return: buffer.mean_return(),
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            clip_frac: stats.clip_frac,
            eval_utility: None,
            eval_vs_greedy: None,
            eval_vs_ramp: None,
        };
        if !eval_set.is_empty() && (update % ppo.eval_interval == 0 || finished) {
            let summary = baselines.score(&params)?;
            row.eval_utility = Some(summary.normalized_utility);
            row.eval_vs_greedy = Some(summary.vs_greedy);
            row.eval_vs_ramp = Some(summary.vs_ramp);
            if summary.normalized_utility > best_score {
                best_score = summary.normalized_utility;
                best = params.clone();
                best_update = update;
            }
        }
        on_row(&row);
        rows.push(row);
    }
    if eval_set.is_empty() {
        best = params.clone();
        best_update = update;
    }
    Ok(TrainOutcome {
        best,
        best_update,
        last: params,
        rows,
    })
}

/// Writes the training report with its fixed header.
pub fn write_train_report(rows: &[TrainRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_train_rows(rows, file)
}

/// Same as [`write_train_report`] on any writer; the header is written even without rows.
pub fn write_train_rows(rows: &[TrainRow], out: impl std::io::Write) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(TRAIN_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<train report>", e))?;
    Ok(())
}

pub const TRAIN_HEADER: [&str; 10] = [
    "update",
    "env_steps",
    "mean_return",
    "policy_loss",
    "value_loss",
    "entropy",
    "clip_frac",
    "eval_utility",
    "eval_vs_greedy",
    "eval_vs_ramp",
];

#[cfg(test)]
mod tests;
