//! Acceptance suite: one PASS/FAIL line per criterion on standard error.
//!
//! Criteria run one at a time so that their runtimes do not overlap.

use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use eosp_core::discrete_graph::{may_precede, DiscreteGraph};
use eosp_core::env::Env;
use eosp_core::instance::{
    generate_instance, origin_transition_duration, transition_duration, AttitudeModel, Instance, Objective,
};
use eosp_core::policy::{evaluate, masked_log_softmax, policy_schedule, sample_action, NetworkConfig, ParameterSet, SampleMode};
use eosp_core::ppo::{
    collect_rollouts, evaluate_policy, minibatch_loss, prepare_samples, train, PpoConfig, TrainConfig,
};
use eosp_core::schedule::{schedule_utility, validate_schedule, Schedule};
use eosp_core::solvers::{exact_oracle, greedy_schedule, ramp_schedule};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Writes past the test harness capture so the line always shows.
fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[{tag}] criterion {id:>2} {name}: {detail}");
}

fn model() -> AttitudeModel {
    AttitudeModel::default()
}

fn gen(n: usize, seed: u64, objective: Objective) -> Instance {
    generate_instance(n, seed, &model(), objective).unwrap()
}

fn random_rollout(inst: &Instance, rng: &mut ChaCha8Rng) -> Env {
    let mut env = Env::reset(inst.clone());
    while !env.is_done() {
        let avail = env.observation().available();
        let a = avail[rng.gen_range(0..avail.len())];
        env.step(a).unwrap();
    }
    env
}

#[test]
fn criterion_01_feasibility() {
    let _g = serial();
    let t0 = Instant::now();
    let mut bad = 0usize;
    let mut schedules = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut check = |inst: &Instance, s: &Schedule| {
        schedules += 1;
        if !validate_schedule(inst, s).is_empty() {
            bad += 1;
        }
    };
    for seed in 0..1000u64 {
        let inst = gen(20 + (seed % 41) as usize, seed, Objective::Utility);
        check(&inst, &greedy_schedule(&inst).schedule);
        check(&inst, &ramp_schedule(&inst).schedule);
        check(&inst, &random_rollout(&inst, &mut rng).schedule());
        if seed % 10 == 0 {
            let small = gen(4 + (seed / 10 % 9) as usize, seed, Objective::Utility);
            check(&small, &exact_oracle(&small, 12).unwrap().schedule);
        }
    }
    let elapsed = t0.elapsed();
    let pass = bad == 0 && elapsed < Duration::from_secs(600);
    verdict(
        1,
        "feasibility",
        pass,
        &format!("{bad} invalid of {schedules} schedules, {:.1} s (limit 600 s)", elapsed.as_secs_f64()),
    );
    assert!(pass);
}

#[test]
fn criterion_02_oracle_dominance() {
    let _g = serial();
    let mut oracle_ok = 0;
    let mut ramp_ge_greedy = 0;
    let mut strict = 0;
    for seed in 0..50u64 {
        let inst = gen(6 + (seed % 5) as usize, 10_000 + seed, Objective::Utility);
        assert_eq!(inst.model.delta, 1.0);
        let o = exact_oracle(&inst, 12).unwrap().utility;
        let r = ramp_schedule(&inst).utility;
        let g = greedy_schedule(&inst).utility;
        if o >= r && o >= g {
            oracle_ok += 1;
        }
        if r >= g {
            ramp_ge_greedy += 1;
        }
        if o > g || r > g {
            strict += 1;
        }
    }
    let pass = oracle_ok == 50 && ramp_ge_greedy >= 35;
    verdict(
        2,
        "oracle dominance",
        pass,
        &format!(
            "oracle >= RAMP, greedy on {oracle_ok}/50 (need 50); RAMP >= greedy on {ramp_ge_greedy}/50 (need 35); \
             {strict} instances where greedy is strictly beaten"
        ),
    );
    assert!(pass);
}

/// Re-checks a removed edge against its witness from first principles.
fn witness_holds(inst: &Instance, g: &DiscreteGraph, e: &eosp_core::discrete_graph::PrunedEdge) -> bool {
    let m = &inst.model;
    let src = g.node(e.source);
    let dst = g.node(e.target);
    let wit = g.node(e.witness);
    let (Some(k), Some(j)) = (wit.acq, dst.acq) else {
        return false;
    };
    let ak = &inst.acquisitions[k];
    let aj = &inst.acquisitions[j];
    let t_k = wit.start;
    let after_source = match src.acq {
        None => t_k >= origin_transition_duration(ak, m),
        Some(i) => {
            let ai = &inst.acquisitions[i];
            i != k && t_k - src.start >= ai.duration + transition_duration(ai, src.start, ak, m).unwrap()
        }
    };
    let in_window = t_k >= ak.e && t_k <= ak.l - ak.duration;
    let before_target = k != j && t_k + ak.duration + transition_duration(ak, t_k, aj, m).unwrap() <= dst.start;
    after_source && in_window && before_target && !may_precede(inst, k, src)
}

#[test]
fn criterion_03_pruning_soundness() {
    let _g = serial();
    let t0 = Instant::now();
    let mut removed = 0usize;
    let mut failed = 0usize;
    for seed in 0..100u64 {
        let inst = gen(20 + (seed % 41) as usize, 20_000 + seed, Objective::Utility);
        let g = DiscreteGraph::build(&inst);
        for e in g.pruned_edges() {
            removed += 1;
            if !witness_holds(&inst, &g, e) {
                failed += 1;
            }
        }
    }
    let elapsed = t0.elapsed();
    let pass = failed == 0 && removed > 0 && elapsed < Duration::from_secs(300);
    verdict(
        3,
        "pruning soundness",
        pass,
        &format!("{failed} failed of {removed} removed edges, {:.1} s (limit 300 s)", elapsed.as_secs_f64()),
    );
    assert!(pass);
}

#[test]
fn criterion_04_update_rule() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut steps = 0usize;
    let mut failures = 0usize;
    let mut seed = 30_000u64;
    while steps < 10_000 {
        let inst = gen(rng.gen_range(10..80), seed, Objective::Utility);
        seed += 1;
        let mut env = Env::reset(inst);
        while !env.is_done() && steps < 10_000 {
            let avail = env.observation().available();
            let a = avail[rng.gen_range(0..avail.len())];
            env.step(a).unwrap();
            steps += 1;
            let g = env.graph();
            let one_left = g.live_count_of(a) == 1;
            let reach = g.reachable_from_origin();
            let all_reachable = g.live_nodes().all(|v| reach[v]);
            let mut succ: Vec<usize> = g.successors().map(|v| g.node(v).acq.unwrap()).collect();
            succ.sort_unstable();
            let mask_ok = env.observation().available() == succ;
            if !(one_left && all_reachable && mask_ok) {
                failures += 1;
            }
        }
    }
    let pass = failures == 0;
    verdict(4, "update-rule invariants", pass, &format!("{failures} failures in {steps} steps"));
    assert!(pass);
}

fn relative_error(fd: f64, g: f64) -> f64 {
    (fd - g).abs() / fd.abs().max(g.abs()).max(1e-3)
}

#[test]
fn criterion_05_gradients() {
    let _g = serial();
    let t0 = Instant::now();
    let config = NetworkConfig {
        hidden_dim: 8,
        n_layers: 2,
        n_heads: 2,
        leaky_slope: 0.2,
    };
    let inst = gen(5, 5, Objective::Utility);
    let behaviour = ParameterSet::init(config, 5).unwrap();
    let mut envs = vec![Env::reset(inst)];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let buffer = collect_rollouts(&mut envs, &behaviour, 4, SampleMode::Sample, &mut rng).unwrap();
    assert_eq!(buffer.transitions[0].obs.len(), 5);
    let cfg = PpoConfig::default();
    let samples = prepare_samples(&buffer, &cfg);
    // Evaluate away from the behaviour policy so that ratios and clipping are exercised.
    let mut params = behaviour.clone();
    for t in params.tensors_mut() {
        for x in &mut t.data {
            *x += rng.gen_range(-0.05..0.05);
        }
    }
    let mut grads = params.zeros_like();
    minibatch_loss(&params, &samples, &cfg, Some(&mut grads)).unwrap();
    let loss = |p: &ParameterSet| minibatch_loss(p, &samples, &cfg, None).unwrap().total;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for ti in 0..grads.len() {
        for k in 0..grads[ti].data.len() {
            let mut plus = params.clone();
            plus.tensors_mut()[ti].data[k] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[ti].data[k] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            worst = worst.max(relative_error(fd, grads[ti].data[k]));
            checked += 1;
        }
    }
    let elapsed = t0.elapsed();
    let pass = worst < 1e-4 && elapsed < Duration::from_secs(60);
    verdict(
        5,
        "gradient correctness",
        pass,
        &format!(
            "max relative error {worst:.2e} over {checked} parameters (limit 1e-4), {:.1} s (limit 60 s)",
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_06_equivariance_and_masking() {
    let _g = serial();
    let params = ParameterSet::init(NetworkConfig::default(), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_logit: f64 = 0.0;
    let mut worst_value: f64 = 0.0;
    let mut masked_mass_nonzero = 0usize;
    let mut masked_draws = 0usize;
    let mut draws = 0usize;
    for o in 0..10u64 {
        let inst = gen(15 + o as usize * 3, 60 + o, Objective::Utility);
        let mut env = Env::reset(inst);
        let steps = rng.gen_range(0..4);
        for _ in 0..steps {
            let avail = env.observation().available();
            if avail.is_empty() {
                break;
            }
            env.step(avail[rng.gen_range(0..avail.len())]).unwrap();
        }
        let obs = env.observation().clone();
        if !obs.has_action() {
            continue;
        }
        let base = evaluate(&params, &obs).unwrap();
        for _ in 0..10 {
            let mut perm: Vec<usize> = (0..obs.len()).collect();
            perm.shuffle(&mut rng);
            let p = evaluate(&params, &obs.permuted(&perm)).unwrap();
            for (k, &old) in perm.iter().enumerate() {
                let a = p.logits[k] as f32;
                let b = base.logits[old] as f32;
                worst_logit = worst_logit.max((a - b).abs() as f64);
            }
            worst_value = worst_value.max(((p.value as f32) - (base.value as f32)).abs() as f64);
        }
        let logp = masked_log_softmax(&base.logits, &obs.mask).unwrap();
        masked_mass_nonzero += obs.mask.iter().zip(&logp).filter(|(m, l)| !**m && l.exp() != 0.0).count();
        for _ in 0..10_000 {
            let a = sample_action(&obs, &base.logits, SampleMode::Sample, &mut rng).unwrap();
            draws += 1;
            if !obs.mask[a.position] {
                masked_draws += 1;
            }
        }
    }
    let pass = worst_logit <= 1e-6 && worst_value <= 1e-6 && masked_mass_nonzero == 0 && masked_draws == 0 && draws == 100_000;
    verdict(
        6,
        "equivariance and masking",
        pass,
        &format!(
            "max logit deviation {worst_logit:.1e}, value deviation {worst_value:.1e} over 100 permutations; \
             {masked_mass_nonzero} masked entries with nonzero probability; {masked_draws} masked picks in {draws} draws"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_07_return_identity() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    let mut episodes = 0;
    for seed in 0..1000u64 {
        let inst = gen(10 + (seed % 31) as usize, 70_000 + seed, Objective::Utility);
        let mut env = Env::reset(inst.clone());
        let mut ret = 0.0;
        while !env.is_done() {
            let avail = env.observation().available();
            let r = env.step(avail[rng.gen_range(0..avail.len())]).unwrap();
            ret += r.reward;
        }
        let u = schedule_utility(&inst, &env.schedule());
        let err = if u == 0.0 { (ret * env.mean_utility()).abs() } else { (ret * env.mean_utility() - u).abs() / u };
        worst = worst.max(err);
        episodes += 1;
    }
    let pass = worst <= 1e-9;
    verdict(7, "return identity", pass, &format!("max relative error {worst:.2e} over {episodes} episodes (limit 1e-9)"));
    assert!(pass);
}

/// Environment steps per training run in criteria 8 and 9.
const OVERFIT_STEPS: usize = 3_200;
const GENERALIZE_STEPS: usize = 12_800;

fn run_config(seed: u64, steps: usize) -> TrainConfig {
    TrainConfig {
        network: NetworkConfig::default(),
        ppo: PpoConfig {
            total_env_steps: steps,
            eval_interval: 1,
            ..Default::default()
        },
        seed,
    }
}

#[test]
fn criterion_08_overfit() {
    let _g = serial();
    let inst = gen(20, 8, Objective::Unitary);
    let greedy = greedy_schedule(&inst).count;
    let ramp = ramp_schedule(&inst).count;
    let mut ge_greedy = 0;
    let mut ge_ramp = 0;
    let mut counts = Vec::new();
    let mut slowest: f64 = 0.0;
    for seed in 0..5 {
        let t0 = Instant::now();
        let eval = vec![("overfit".to_string(), inst.clone())];
        let out = train(std::slice::from_ref(&inst), &eval, &run_config(seed, OVERFIT_STEPS), |_| {}).unwrap();
        let count = policy_schedule(&out.best, &inst).unwrap().count;
        slowest = slowest.max(t0.elapsed().as_secs_f64());
        counts.push(count);
        ge_greedy += usize::from(count >= greedy);
        ge_ramp += usize::from(count >= ramp);
    }
    let pass = ge_greedy >= 4 && ge_ramp >= 3 && slowest < 1800.0;
    verdict(
        8,
        "overfit single instance",
        pass,
        &format!(
            "policy counts {counts:?} vs greedy {greedy}, RAMP {ramp}; >= greedy {ge_greedy}/5 (need 4), \
             >= RAMP {ge_ramp}/5 (need 3); {OVERFIT_STEPS} env steps, slowest seed {slowest:.0} s (limit 1800 s)"
        ),
    );
    assert!(pass);
}

fn named(prefix: &str, seeds: std::ops::Range<u64>, n: usize, objective: Objective) -> Vec<(String, Instance)> {
    seeds.map(|s| (format!("{prefix}{s}"), gen(n, s, objective))).collect()
}

#[test]
fn criterion_09_10_generalization_and_size_transfer() {
    let _g = serial();
    let train_set: Vec<Instance> = named("train", 90_000..90_032, 20, Objective::Utility)
        .into_iter()
        .map(|(_, i)| i)
        .collect();
    // Checkpoint selection uses its own instances; the test set stays unseen.
    let select = named("select", 91_000..91_008, 20, Objective::Utility);
    let test = named("test", 92_000..92_008, 20, Objective::Utility);
    let mut ratios = Vec::new();
    let mut wins = 0;
    let mut slowest: f64 = 0.0;
    let mut first: Option<Arc<ParameterSet>> = None;
    for seed in 0..5 {
        let t0 = Instant::now();
        let out = train(&train_set, &select, &run_config(seed, GENERALIZE_STEPS), |_| {}).unwrap();
        let report = evaluate_policy(&out.best, &test).unwrap();
        slowest = slowest.max(t0.elapsed().as_secs_f64());
        let r = report.summary.mean_of_ratios_vs_greedy;
        ratios.push(format!("{r:.10}"));
        wins += usize::from(r >= 1.0);
        first.get_or_insert_with(|| Arc::new(out.best));
    }
    let pass = wins >= 3 && slowest < 7200.0;
    verdict(
        9,
        "generalization",
        pass,
        &format!(
            "mean policy/greedy ratio per seed {ratios:?}; >= 1.00 in {wins}/5 (need 3); {GENERALIZE_STEPS} env steps, \
             slowest seed {slowest:.0} s (limit 7200 s)"
        ),
    );

    let ckpt = first.unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ckpt_path = dir.path().join("checkpoint.bin");
    ckpt.save(&ckpt_path).unwrap();
    let reloaded = ParameterSet::load(&ckpt_path).unwrap();
    let mut detail = Vec::new();
    let mut transfer_ok = true;
    for n in [5usize, 50, 200] {
        let insts = named(&format!("n{n}-"), 93_000..93_003, n, Objective::Utility);
        match evaluate_policy(&reloaded, &insts) {
            Ok(rep) => {
                let v = rep.summary.total_policy_violations;
                transfer_ok &= v == 0;
                detail.push(format!("N={n}: {v} violations, ratio vs greedy {:.4}", rep.summary.mean_of_ratios_vs_greedy));
            }
            Err(e) => {
                transfer_ok = false;
                detail.push(format!("N={n}: error {e}"));
            }
        }
    }
    verdict(10, "size transfer", transfer_ok, &detail.join("; "));
    assert!(pass && transfer_ok);
}

fn eosp(args: &[&str], cwd: &Path) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_eosp"))
        .args(args)
        .current_dir(cwd)
        .env("EOSP_THREADS", "1")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "eosp {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Runs the pipeline in `dir` and returns every produced artifact except manifests.
fn pipeline(dir: &Path) -> Vec<(String, Vec<u8>)> {
    eosp(&["gen", "--n", "20", "--seed", "11", "--out", "inst.json"], dir);
    eosp(&["gen", "--n", "9", "--seed", "12", "--out", "small.json"], dir);
    for algo in ["greedy", "ramp"] {
        eosp(&["solve", "--algo", algo, "--in", "inst.json", "--out", &format!("{algo}.json")], dir);
    }
    eosp(&["solve", "--algo", "oracle", "--in", "small.json", "--out", "oracle.json"], dir);
    eosp(&["gen", "--n", "10", "--seed", "100", "--count", "3", "--out", "train"], dir);
    eosp(&["gen", "--n", "10", "--seed", "200", "--count", "2", "--out", "eval"], dir);
    let cfg = r#"{"network": {"hidden_dim": 8, "n_layers": 2, "n_heads": 2, "leaky_slope": 0.2},
                  "ppo": {"total_env_steps": 300, "episodes_per_batch": 4, "eval_interval": 2}, "seed": 3}"#;
    std::fs::write(dir.join("config.json"), cfg).unwrap();
    eosp(
        &["train", "--config", "config.json", "--train-dir", "train", "--eval-dir", "eval", "--out-dir", "run"],
        dir,
    );
    let mut files = Vec::new();
    for rel in [
        "inst.json",
        "small.json",
        "greedy.json",
        "ramp.json",
        "oracle.json",
        "run/train_report.csv",
        "run/checkpoint.bin",
        "run/last.bin",
    ] {
        files.push((rel.to_string(), std::fs::read(dir.join(rel)).unwrap()));
    }
    files
}

#[test]
fn criterion_11_determinism() {
    let _g = serial();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = pipeline(a.path());
    let second = pipeline(b.path());
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let pass = differing.is_empty();
    verdict(
        11,
        "determinism",
        pass,
        &format!("{} artifacts compared, differing: {differing:?}", first.len()),
    );
    assert!(pass);
}
