use super::*;
use crate::continuous_graph::{NodeFeatures, NodeStatus};
use crate::instance::{generate_instance, Objective};
use crate::policy::gradients;
use crate::schedule::validate_schedule;

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn gae_monte_carlo_limit() {
    let (adv, ret) = compute_gae(&[1.0, 1.0], &[0.0, 0.0], &[false, true], 1.0, 1.0);
    assert_eq!(adv, vec![2.0, 1.0]);
    assert_eq!(ret, vec![2.0, 1.0]);
}

#[test]
fn gae_zero_inputs() {
    let (adv, ret) = compute_gae(&[0.0; 4], &[0.0; 4], &[false, false, false, true], 1.0, 0.95);
    assert!(adv.iter().chain(&ret).all(|&x| x == 0.0));
}

/// Hand-unrolled recurrence for three steps ending in a terminal state.
fn gae_three_reference(r: [f64; 3], v: [f64; 3], gamma: f64, lambda: f64) -> [f64; 3] {
    let d2 = r[2] - v[2];
    let d1 = r[1] + gamma * v[2] - v[1];
    let d0 = r[0] + gamma * v[1] - v[0];
    let a2 = d2;
    let a1 = d1 + gamma * lambda * a2;
    let a0 = d0 + gamma * lambda * a1;
    [a0, a1, a2]
}

#[test]
fn gae_matches_unrolled_recurrence() {
    let (adv, ret) = compute_gae(&[1.0, 0.0, 2.0], &[0.5; 3], &[false, false, true], 1.0, 0.95);
    let expected = gae_three_reference([1.0, 0.0, 2.0], [0.5; 3], 1.0, 0.95);
    assert!(close(&adv, &expected, 1e-12), "{adv:?}");
    assert!(close(&adv, &[2.35375, 1.425, 1.5], 1e-12));
    assert!(close(&ret, &[2.85375, 1.925, 2.0], 1e-12));
}

#[test]
fn gae_does_not_leak_across_episodes() {
    let r = [1.0, 2.0, 3.0, 4.0];
    let v = [0.1, 0.2, 0.3, 0.4];
    let (joint, _) = compute_gae(&r, &v, &[false, true, false, true], 1.0, 0.9);
    let (a, _) = compute_gae(&r[..2], &v[..2], &[false, true], 1.0, 0.9);
    let (b, _) = compute_gae(&r[2..], &v[2..], &[false, true], 1.0, 0.9);
    assert_eq!(joint, [a, b].concat());
}

#[test]
fn normalization_moments() {
    let mut adv = vec![3.0, -1.0, 0.5, 7.0, 2.0];
    normalize_advantages(&mut adv);
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() <= 1e-12);
    assert!((std - 1.0).abs() <= 1e-12);

    let mut flat = vec![2.0; 3];
    normalize_advantages(&mut flat);
    assert_eq!(flat, vec![0.0; 3]);
}

fn tiny_config() -> NetworkConfig {
    NetworkConfig {
        hidden_dim: 8,
        n_layers: 2,
        n_heads: 2,
        leaky_slope: 0.2,
    }
}

fn instance(n: usize, seed: u64, objective: Objective) -> Instance {
    generate_instance(n, seed, &Default::default(), objective).unwrap()
}

fn small_buffer(seed: u64) -> (ParameterSet, RolloutBuffer) {
    let params = ParameterSet::init(tiny_config(), seed).unwrap();
    let mut envs = vec![Env::reset(instance(60, seed, Objective::Utility))];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let buffer = collect_rollouts(&mut envs, &params, 3, SampleMode::Sample, &mut rng).unwrap();
    (params, buffer)
}

#[test]
fn rollouts_record_whole_episodes() {
    let params = ParameterSet::init(tiny_config(), 1).unwrap();
    let insts = [instance(12, 3, Objective::Unitary), instance(9, 4, Objective::Unitary)];
    let mut envs: Vec<Env> = insts.iter().cloned().map(Env::reset).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let buffer = collect_rollouts(&mut envs, &params, 6, SampleMode::Sample, &mut rng).unwrap();
    assert_eq!(buffer.episodes.len(), 6);
    assert_eq!(buffer.len(), buffer.episodes.iter().map(|e| e.length).sum::<usize>());
    let mut at = 0;
    for ep in &buffer.episodes {
        let steps = &buffer.transitions[at..at + ep.length];
        at += ep.length;
        assert_eq!(ep.ret, ep.count as f64, "unitary return counts scheduled acquisitions");
        assert!(steps.last().unwrap().done);
        assert!(steps[..steps.len() - 1].iter().all(|t| !t.done));
        for t in steps {
            assert!(t.obs.mask[t.position]);
            assert_eq!(t.obs.nodes[t.position], t.acq_id);
        }
    }
}

#[test]
fn argmax_rollouts_repeat() {
    let params = ParameterSet::init(tiny_config(), 2).unwrap();
    let run = || {
        let mut envs = vec![Env::reset(instance(10, 8, Objective::Utility))];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        collect_rollouts(&mut envs, &params, 2, SampleMode::Argmax, &mut rng).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.episodes, b.episodes);
    let key = |buf: &RolloutBuffer| {
        buf.transitions
            .iter()
            .map(|t| (t.acq_id, t.log_prob.to_bits(), t.value.to_bits()))
            .collect::<Vec<_>>()
    };
    assert_eq!(key(&a), key(&b));
}

#[test]
fn rollouts_need_an_environment() {
    let params = ParameterSet::init(tiny_config(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(collect_rollouts(&mut [], &params, 1, SampleMode::Sample, &mut rng).is_err());
}

#[test]
fn unchanged_parameters_give_unit_ratios() {
    let (params, buffer) = small_buffer(3);
    let samples = prepare_samples(&buffer, &PpoConfig::default());
    for s in &samples {
        let out = evaluate(&params, &s.obs).unwrap();
        let (loss, _, _) = sample_loss(&out.logits, out.value, s, &PpoConfig::default()).unwrap();
        assert_eq!(loss.ratio, 1.0);
        assert!(!loss.clipped);
    }
    let stats = minibatch_loss(&params, &samples, &PpoConfig::default(), None).unwrap();
    assert_eq!(stats.clip_frac, 0.0);
}

#[test]
fn zero_advantage_has_no_policy_gradient() {
    let (params, buffer) = small_buffer(4);
    let cfg = PpoConfig {
        entropy_coef: 0.0,
        ..Default::default()
    };
    for s in prepare_samples(&buffer, &cfg) {
        let s = PpoSample { advantage: 0.0, ..s };
        let out = evaluate(&params, &s.obs).unwrap();
        let (loss, dlogits, _) = sample_loss(&out.logits, out.value, &s, &cfg).unwrap();
        assert_eq!(loss.policy, 0.0);
        assert!(dlogits.iter().all(|&d| d == 0.0));
    }
}

#[test]
fn masked_logits_get_no_gradient() {
    let (params, buffer) = small_buffer(5);
    let cfg = PpoConfig::default();
    for s in prepare_samples(&buffer, &cfg) {
        let out = evaluate(&params, &s.obs).unwrap();
        let (_, dlogits, _) = sample_loss(&out.logits, out.value, &s, &cfg).unwrap();
        for (d, m) in dlogits.iter().zip(&s.obs.mask) {
            if !m {
                assert_eq!(*d, 0.0);
            }
        }
    }
}

fn perturbed(params: &ParameterSet, seed: u64, scale: f64) -> ParameterSet {
    let mut p = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in p.tensors_mut() {
        for x in &mut t.data {
            *x += rng.gen_range(-scale..scale);
        }
    }
    p
}

#[test]
fn combined_loss_gradient_matches_finite_differences() {
    let (old, buffer) = small_buffer(6);
    let params = perturbed(&old, 60, 0.05);
    let cfg = PpoConfig::default();
    let samples: Vec<PpoSample> = prepare_samples(&buffer, &cfg)
        .into_iter()
        .filter(|s| s.obs.available().len() > 1)
        .take(6)
        .collect();
    assert_eq!(samples.len(), 6);
    let mut grads = params.zeros_like();
    minibatch_loss(&params, &samples, &cfg, Some(&mut grads)).unwrap();
    let loss_at = |p: &ParameterSet| minibatch_loss(p, &samples, &cfg, None).unwrap().total;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (ti, g) in grads.iter().enumerate() {
        for k in (0..g.data.len()).step_by(7) {
            let mut plus = params.clone();
            plus.tensors_mut()[ti].data[k] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[ti].data[k] -= h;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            // Floor keeps round-off on near-zero entries from dominating.
            let err = (fd - g.data[k]).abs() / fd.abs().max(g.data[k].abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

fn cosine(a: &[Matrix], b: &[Matrix]) -> f64 {
    let dot: f64 = a.iter().zip(b).flat_map(|(x, y)| x.data.iter().zip(&y.data)).map(|(x, y)| x * y).sum();
    dot / (global_norm(a) * global_norm(b))
}

#[test]
fn unclipped_single_epoch_direction_is_vanilla_policy_gradient() {
    let (params, buffer) = small_buffer(7);
    let cfg = PpoConfig {
        clip_eps: 1e9,
        value_coef: 0.0,
        entropy_coef: 0.0,
        epochs: 1,
        ..Default::default()
    };
    let samples = prepare_samples(&buffer, &cfg);
    let mut ppo = params.zeros_like();
    minibatch_loss(&params, &samples, &cfg, Some(&mut ppo)).unwrap();

    // Score-function estimator: -mean(A * grad log pi(a)).
    let mut vanilla = params.zeros_like();
    for s in &samples {
        let out = evaluate(&params, &s.obs).unwrap();
        let logp = masked_log_softmax(&out.logits, &s.obs.mask).unwrap();
        let dlogits: Vec<f64> = (0..logp.len())
            .map(|j| {
                let p = if s.obs.mask[j] { logp[j].exp() } else { 0.0 };
                let onehot = if j == s.position { 1.0 } else { 0.0 };
                -s.advantage * (onehot - p) / samples.len() as f64
            })
            .collect();
        let g = gradients(&params, &s.obs, &dlogits, 0.0).unwrap();
        for (v, x) in vanilla.iter_mut().zip(&g) {
            v.data.iter_mut().zip(&x.data).for_each(|(a, b)| *a += b);
        }
    }
    assert!(global_norm(&vanilla) > 1e-6);
    let c = cosine(&ppo, &vanilla);
    assert!(c > 0.999, "cosine {c}");
}

fn bandit_obs() -> Arc<ContinuousObservation> {
    let f = |utility_norm| NodeFeatures {
        e: 0.2,
        l: 0.4,
        d: 0.01,
        pitch_min: -0.5,
        pitch_max: 0.5,
        pitch_mean: 0.0,
        roll_min: 0.1,
        roll_max: 0.1,
        roll_mean: 0.1,
        utility_norm,
        status: NodeStatus::AvailableNow,
    };
    Arc::new(ContinuousObservation {
        nodes: vec![0, 1],
        features: vec![f(2.0), f(0.5)],
        edges: vec![],
        mask: vec![true, true],
    })
}

#[test]
fn bandit_converges_to_better_arm() {
    let obs = bandit_obs();
    let mut params = ParameterSet::init(tiny_config(), 11).unwrap();
    let cfg = PpoConfig {
        learning_rate: 3e-3,
        ..Default::default()
    };
    let mut opt = Adam::new(&params, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let prob_good = |p: &ParameterSet| {
        let out = evaluate(p, &obs).unwrap();
        masked_log_softmax(&out.logits, &obs.mask).unwrap()[0].exp()
    };
    let mut reached = None;
    for update in 1..=200 {
        let mut buffer = RolloutBuffer::default();
        for _ in 0..16 {
            let out = evaluate(&params, &obs).unwrap();
            let a = sample_action(&obs, &out.logits, SampleMode::Sample, &mut rng).unwrap();
            let reward = if a.position == 0 { 1.0 } else { 0.0 };
            buffer.transitions.push(Transition {
                obs: obs.clone(),
                position: a.position,
                acq_id: a.acq_id,
                log_prob: a.log_prob,
                value: out.value,
                reward,
                done: true,
            });
        }
        ppo_update(&buffer, &mut params, &mut opt, &cfg, &mut rng).unwrap();
        if prob_good(&params) > 0.99 {
            reached = Some(update);
            break;
        }
    }
    assert!(reached.is_some(), "final probability {}", prob_good(&params));
}

#[test]
fn adam_keeps_parameters_in_f32() {
    let (mut params, buffer) = small_buffer(9);
    let mut opt = Adam::new(&params, 1e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    ppo_update(&buffer, &mut params, &mut opt, &PpoConfig::default(), &mut rng).unwrap();
    for t in params.tensors() {
        assert!(t.data.iter().all(|&x| x as f32 as f64 == x));
    }
    let back = ParameterSet::from_bytes(&params.to_bytes().unwrap()).unwrap();
    assert_eq!(back, params);
}

#[test]
fn gradient_clipping_bounds_norm() {
    let mut g = vec![Matrix::from_vec(1, 2, vec![3.0, 4.0])];
    assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
    assert!((global_norm(&g) - 1.0).abs() < 1e-15);
    let mut small = vec![Matrix::from_vec(1, 1, vec![0.1])];
    clip_grad_norm(&mut small, 1.0);
    assert_eq!(small[0].data, vec![0.1]);
}

#[test]
fn empty_buffer_is_rejected() {
    let params0 = ParameterSet::init(tiny_config(), 0).unwrap();
    let mut params = params0.clone();
    let mut opt = Adam::new(&params, 1e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = ppo_update(&RolloutBuffer::default(), &mut params, &mut opt, &PpoConfig::default(), &mut rng);
    assert!(err.is_err());
    assert_eq!(params, params0);
}

fn smoke_config(steps: usize) -> TrainConfig {
    TrainConfig {
        network: tiny_config(),
        ppo: PpoConfig {
            total_env_steps: steps,
            episodes_per_batch: 8,
            eval_interval: 2,
            ..Default::default()
        },
        seed: 21,
    }
}

#[test]
fn smoke_training_run() {
    let train_set = vec![instance(10, 1, Objective::Unitary)];
    let eval_set = vec![("held".to_string(), instance(10, 2, Objective::Unitary))];
    let mut seen = 0;
    let out = train(&train_set, &eval_set, &smoke_config(2000), |_| seen += 1).unwrap();
    assert!(!out.rows.is_empty());
    assert_eq!(seen, out.rows.len());
    assert!(out.rows.last().unwrap().env_steps >= 2000);
    assert!(out.rows.windows(2).all(|w| w[0].update + 1 == w[1].update));
    assert!(out.rows.last().unwrap().eval_utility.is_some());

    let best = out
        .rows
        .iter()
        .filter_map(|r| r.eval_utility.map(|u| (u, r.update)))
        .fold((f64::NEG_INFINITY, 0), |acc, x| if x.0 > acc.0 { x } else { acc });
    assert_eq!(out.best_update, best.1);
    let report = evaluate_policy(&out.best, &eval_set).unwrap();
    let normalized = report.rows[0].policy_utility / eval_set[0].1.mean_utility();
    assert_eq!(normalized, best.0);
    assert_eq!(report.summary.total_policy_violations, 0);
}

#[test]
fn training_is_reproducible() {
    let train_set = vec![instance(8, 1, Objective::Utility), instance(8, 2, Objective::Utility)];
    let eval_set = vec![("e".to_string(), instance(8, 3, Objective::Utility))];
    let run = || {
        let out = train(&train_set, &eval_set, &smoke_config(300), |_| {}).unwrap();
        let mut csv = Vec::new();
        write_train_rows(&out.rows, &mut csv).unwrap();
        (csv, out.best.to_bytes().unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn train_report_header() {
    let mut csv = Vec::new();
    write_train_rows(&[], &mut csv).unwrap();
    assert_eq!(
        String::from_utf8(csv).unwrap().trim(),
        "update,env_steps,mean_return,policy_loss,value_loss,entropy,clip_frac,eval_utility,eval_vs_greedy,eval_vs_ramp"
    );
}

#[test]
fn training_requires_instances() {
    assert!(train(&[], &[], &smoke_config(10), |_| {}).is_err());
}

#[test]
fn config_round_trip_and_overrides() {
    let cfg = TrainConfig::from_json(r#"{"ppo": {"clip_eps": 0.1}, "seed": 4}"#).unwrap();
    assert_eq!(cfg.ppo.clip_eps, 0.1);
    assert_eq!(cfg.ppo.epochs, 3);
    assert_eq!(cfg.network, NetworkConfig::default());
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(TrainConfig::from_json(&text).unwrap(), cfg);
    assert!(TrainConfig::from_json(r#"{"ppo": {"clip": 0.1}}"#).is_err());
    assert!(TrainConfig::from_json(r#"{"ppo": {"gamma": 0.0}}"#).is_err());
}

fn row(name: &str, policy: f64, greedy: f64, ramp: f64) -> EvalRow {
    EvalRow {
        instance: name.into(),
        acquisitions: 5,
        policy_utility: policy,
        greedy_utility: greedy,
        ramp_utility: ramp,
        policy_count: 0,
        greedy_count: 0,
        ramp_count: 0,
        ratio_vs_greedy: policy / greedy,
        ratio_vs_ramp: policy / ramp,
        policy_violations: 0,
    }
}

#[test]
fn win_tie_loss_counts_and_mean_of_ratios() {
    let rows = vec![row("a", 3.0, 2.0, 3.0), row("b", 4.0, 1.0, 5.0), row("c", 2.0, 2.0, 2.0)];
    let report = EvalReport::from_rows(rows).unwrap();
    let s = &report.summary;
    assert_eq!(
        s.vs_greedy,
        WinTieLoss {
            above: 2,
            equal: 1,
            below: 0
        }
    );
    assert_eq!(
        s.vs_ramp,
        WinTieLoss {
            above: 0,
            equal: 2,
            below: 1
        }
    );
    assert!((s.mean_of_ratios_vs_greedy - (1.5 + 4.0 + 1.0) / 3.0).abs() < 1e-15);
    assert!((s.mean_policy_utility / s.mean_greedy_utility - 9.0 / 5.0).abs() < 1e-15);
    assert!(EvalReport::from_rows(vec![]).is_err());
}

#[test]
fn eval_report_files() {
    let dir = tempfile::tempdir().unwrap();
    let report = EvalReport::from_rows(vec![row("a", 3.0, 2.0, 3.0)]).unwrap();
    let csv_path = dir.path().join("r.csv");
    let json_path = dir.path().join("r.json");
    write_eval_report(&report, &csv_path, ReportFormat::Csv).unwrap();
    write_eval_report(&report, &json_path, ReportFormat::Json).unwrap();
    let text = std::fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("instance,acquisitions,policy_utility"));
    assert_eq!(lines.len(), 6);
    assert!(lines[2].starts_with("mean,"));
    assert_eq!(lines[3], "above,,,,,,,,1,0,");
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json_path).unwrap()).unwrap();
    assert_eq!(json["summary"]["vs_ramp"]["equal"], 1);
    assert!(evaluate_policy(&ParameterSet::init(tiny_config(), 0).unwrap(), &[]).is_err());
}

#[test]
fn identical_schedule_counts_as_tie() {
    let inst = instance(1, 5, Objective::Utility);
    let params = ParameterSet::init(tiny_config(), 0).unwrap();
    let r = evaluate_instance(&params, "one", &inst).unwrap();
    assert_eq!(r.policy_count, 1);
    assert_eq!(r.ratio_vs_greedy, 1.0);
    let report = EvalReport::from_rows(vec![r]).unwrap();
    assert_eq!(report.summary.vs_greedy.equal, 1);
}

#[test]
fn policy_schedules_are_valid() {
    let params = ParameterSet::init(tiny_config(), 3).unwrap();
    for seed in 0..5 {
        let inst = instance(15, seed, Objective::Utility);
        let rep = crate::policy::policy_schedule(&params, &inst).unwrap();
        assert!(validate_schedule(&inst, &rep.schedule).is_empty());
    }
}
