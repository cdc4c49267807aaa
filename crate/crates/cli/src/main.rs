//! `eosp`: generate instances, inspect graphs, solve, train, evaluate and validate.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use eosp_core::continuous_graph::{size_row, SizeRow};
use eosp_core::discrete_graph::DiscreteGraph;
use eosp_core::env::Env;
use eosp_core::instance::{generate_instance, load_instance, save_instance, AttitudeModel, Instance, Objective};
use eosp_core::policy::{rollout_policy, ParameterSet, SampleMode};
use eosp_core::ppo::{
    evaluate_instance, train, write_train_report, EvalReport, ReportFormat, TrainConfig, TrainRow,
};
use eosp_core::schedule::{load_schedule, save_schedule, validate_schedule};
use eosp_core::solvers::{
    exact_oracle, greedy_schedule, ramp_schedule, Algorithm, SolverReport, ORACLE_DEFAULT_LIMIT,
};

use manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(name = "eosp", version, about = "Agile Earth-observation satellite scheduling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ObjectiveArg {
    Utility,
    Unitary,
}

impl From<ObjectiveArg> for Objective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::Utility => Objective::Utility,
            ObjectiveArg::Unitary => Objective::Unitary,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum AlgoArg {
    Greedy,
    Ramp,
    Oracle,
    Policy,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate random instances.
    Gen {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum, default_value = "utility")]
        objective: ObjectiveArg,
        /// Instance file, or a directory when `--count` is given.
        #[arg(long)]
        out: PathBuf,
        /// Write this many instances with seeds `seed..seed+count` into the `--out` directory.
        #[arg(long)]
        count: Option<u64>,
    },
    /// Build graphs and report their size.
    Graph {
        /// Instance files or directories of instances.
        #[arg(long = "in", required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        /// Emit one CSV row per instance: acquisitions, nodes, edges and ratios.
        #[arg(long)]
        stats: bool,
        /// Write the discrete graph of a single instance as JSON.
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Write the statistics here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute a schedule.
    Solve {
        #[arg(long, value_enum)]
        algo: AlgoArg,
        #[arg(long = "in")]
        input: PathBuf,
        /// Policy checkpoint, required by `--algo policy`.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = ORACLE_DEFAULT_LIMIT)]
        oracle_limit: usize,
        /// Write the per-step trajectory of the policy episode as JSON lines.
        #[arg(long)]
        trajectory: Option<PathBuf>,
        /// Print the summary as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Train a policy with PPO.
    Train {
        /// JSON file with `network`, `ppo` and `seed`; omitted fields keep their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train_dir: PathBuf,
        #[arg(long)]
        eval_dir: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compare a checkpoint with greedy and RAMP.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Instance files or directories of instances.
        #[arg(long, required = true, num_args = 1..)]
        instances: Vec<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        /// Write the report as JSON instead of CSV.
        #[arg(long)]
        json: bool,
    },
    /// Check a schedule against an instance.
    Validate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        schedule: PathBuf,
    },
}

/// Outcome that maps to exit code 1.
#[derive(Debug)]
struct ValidationFailed(usize);

impl std::fmt::Display for ValidationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} violation(s)", self.0)
    }
}

impl std::error::Error for ValidationFailed {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            eprintln!("\n{}", Cli::command().render_help());
            return ExitCode::from(2);
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<ValidationFailed>().is_some() => {
            eprintln!("invalid: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Applies `EOSP_THREADS` to the worker pool.
fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("EOSP_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .with_context(|| format!("EOSP_THREADS must be a positive integer, got `{value}`"))?;
    if n == 0 {
        bail!("EOSP_THREADS must be a positive integer, got 0");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(command: Command) -> Result<()> {
    let started = Instant::now();
    match command {
        Command::Gen {
            n,
            seed,
            objective,
            out,
            count,
        } => cmd_gen(n, seed, objective, &out, count, started),
        Command::Graph {
            input,
            stats,
            dump,
            out,
        } => cmd_graph(&input, stats, dump.as_deref(), out.as_deref(), started),
        Command::Solve {
            algo,
            input,
            ckpt,
            out,
            oracle_limit,
            trajectory,
            json,
        } => cmd_solve(
            algo,
            &input,
            ckpt.as_deref(),
            &out,
            oracle_limit,
            trajectory.as_deref(),
            json,
            started,
        ),
        Command::Train {
            config,
            train_dir,
            eval_dir,
            out_dir,
        } => cmd_train(config.as_deref(), &train_dir, eval_dir.as_deref(), &out_dir, started),
        Command::Eval {
            ckpt,
            instances,
            report,
            json,
        } => cmd_eval(&ckpt, &instances, &report, json, started),
        Command::Validate { input, schedule } => cmd_validate(&input, &schedule),
    }
}

fn version() -> String {
    env!("CARGO_PKG_VERSION").to_string()
}

fn record(
    dir: &Path,
    command: &str,
    config: &impl Serialize,
    seeds: Vec<u64>,
    inputs: Vec<PathBuf>,
    artifacts: Vec<PathBuf>,
    started: Instant,
) -> Result<()> {
    manifest::append(
        dir,
        &RunManifest {
            command: command.into(),
            config_hash: manifest::config_hash(config)?,
            seeds,
            inputs,
            artifacts,
            wall_clock_s: started.elapsed().as_secs_f64(),
            version: version(),
        },
    )
}

/// Expands directories into their `.json` files, sorted by name.
fn instance_paths(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("cannot read directory {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.extension().is_some_and(|x| x == "json")
                        && f.file_name().is_some_and(|n| n != manifest::MANIFEST_NAME)
                })
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        bail!("no instance files found in {}", display_list(inputs));
    }
    Ok(out)
}

fn display_list(paths: &[PathBuf]) -> String {
    paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
}

fn load_named(paths: &[PathBuf]) -> Result<Vec<(String, Instance)>> {
    paths
        .iter()
        .map(|p| {
            let inst = load_instance(p).with_context(|| format!("cannot load instance {}", p.display()))?;
            let name = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
            Ok((name, inst))
        })
        .collect()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create directory {}", dir.display()))
}

#[derive(Serialize)]
struct GenConfig {
    n: usize,
    seed: u64,
    objective: ObjectiveArg,
    count: Option<u64>,
    model: AttitudeModel,
}

fn cmd_gen(n: usize, seed: u64, objective: ObjectiveArg, out: &Path, count: Option<u64>, started: Instant) -> Result<()> {
    let model = AttitudeModel::default();
    let config = GenConfig {
        n,
        seed,
        objective,
        count,
        model,
    };
    let (dir, seeds, files): (PathBuf, Vec<u64>, Vec<PathBuf>) = match count {
        None => (manifest::dir_of(out), vec![seed], vec![out.to_path_buf()]),
        Some(0) => bail!("--count must be positive"),
        Some(k) => {
            let seeds: Vec<u64> = (0..k).map(|i| seed + i).collect();
            let files = seeds.iter().map(|s| out.join(format!("instance_{s:06}.json"))).collect();
            (out.to_path_buf(), seeds, files)
        }
    };
    ensure_dir(&dir)?;
    seeds.par_iter().zip(&files).try_for_each(|(&s, path)| -> Result<()> {
        let inst = generate_instance(n, s, &model, objective.into())?;
        save_instance(&inst, path).with_context(|| format!("cannot write {}", path.display()))
    })?;
    println!("wrote {} instance(s) of {n} acquisitions", files.len());
    record(&dir, "gen", &config, seeds, vec![], files, started)
}

fn cmd_graph(inputs: &[PathBuf], stats: bool, dump: Option<&Path>, out: Option<&Path>, started: Instant) -> Result<()> {
    let paths = instance_paths(inputs)?;
    let named = load_named(&paths)?;
    if let Some(dump_path) = dump {
        let [(_, inst)] = named.as_slice() else {
            bail!("--dump needs exactly one instance, got {}", named.len());
        };
        let g = DiscreteGraph::build(inst);
        let text = serde_json::to_string(&g.dump())?;
        std::fs::write(dump_path, text).with_context(|| format!("cannot write {}", dump_path.display()))?;
        record(
            &manifest::dir_of(dump_path),
            "graph --dump",
            &"dump",
            vec![inst.seed],
            paths.clone(),
            vec![dump_path.to_path_buf()],
            started,
        )?;
    }
    let rows: Vec<(String, SizeRow)> = named.par_iter().map(|(name, inst)| (name.clone(), size_row(inst))).collect();
    if stats {
        let mut buf = Vec::new();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record([
                "instance",
                "acquisitions",
                "discrete_nodes",
                "continuous_nodes",
                "node_ratio",
                "discrete_edges",
                "continuous_edges",
                "edge_ratio",
            ])?;
            for (name, r) in &rows {
                w.write_record([
                    name.clone(),
                    r.acquisitions.to_string(),
                    r.discrete_nodes.to_string(),
                    r.continuous_nodes.to_string(),
                    r.node_ratio.to_string(),
                    r.discrete_edges.to_string(),
                    r.continuous_edges.to_string(),
                    r.edge_ratio.to_string(),
                ])?;
            }
            w.flush()?;
        }
        match out {
            Some(path) => {
                std::fs::write(path, &buf).with_context(|| format!("cannot write {}", path.display()))?;
                let seeds = named.iter().map(|(_, i)| i.seed).collect();
                record(&manifest::dir_of(path), "graph --stats", &"stats", seeds, paths, vec![path.to_path_buf()], started)?;
            }
            None => print!("{}", String::from_utf8(buf)?),
        }
    } else if dump.is_none() {
        for (name, r) in &rows {
            println!(
                "{name}: {} acquisitions, {} nodes, {} edges ({} continuous nodes, {} continuous edges)",
                r.acquisitions, r.discrete_nodes, r.discrete_edges, r.continuous_nodes, r.continuous_edges
            );
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct SolveConfig {
    algo: AlgoArg,
    oracle_limit: usize,
}

#[derive(Serialize)]
struct SolveSummary {
    algorithm: Algorithm,
    utility: f64,
    count: usize,
    runtime_s: f64,
}

#[allow(clippy::too_many_arguments)]
fn cmd_solve(
    algo: AlgoArg,
    input: &Path,
    ckpt: Option<&Path>,
    out: &Path,
    oracle_limit: usize,
    trajectory: Option<&Path>,
    json: bool,
    started: Instant,
) -> Result<()> {
    if trajectory.is_some() && !matches!(algo, AlgoArg::Policy) {
        bail!("--trajectory is only available with --algo policy");
    }
    let inst = load_instance(input).with_context(|| format!("cannot load instance {}", input.display()))?;
    let mut inputs = vec![input.to_path_buf()];
    let mut artifacts = vec![out.to_path_buf()];
    let report = match algo {
        AlgoArg::Greedy => greedy_schedule(&inst),
        AlgoArg::Ramp => ramp_schedule(&inst),
        AlgoArg::Oracle => exact_oracle(&inst, oracle_limit)?,
        AlgoArg::Policy => {
            let Some(ckpt) = ckpt else {
                bail!("--algo policy needs --ckpt");
            };
            let params = ParameterSet::load(ckpt).with_context(|| format!("cannot load checkpoint {}", ckpt.display()))?;
            inputs.push(ckpt.to_path_buf());
            let t0 = Instant::now();
            let mut env = Env::reset(inst.clone());
            rollout_policy(&params, &mut env, SampleMode::Argmax, &mut rand::rngs::mock::StepRng::new(0, 0))?;
            if let Some(path) = trajectory {
                let mut text = String::new();
                for rec in env.trajectory() {
                    text.push_str(&serde_json::to_string(rec)?);
                    text.push('\n');
                }
                std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
                artifacts.push(path.to_path_buf());
            }
            SolverReport::new(&inst, env.schedule(), Algorithm::Policy, t0.elapsed().as_secs_f64())
        }
    };
    let dir = manifest::dir_of(out);
    ensure_dir(&dir)?;
    save_schedule(&report.schedule, inst.seed, out).with_context(|| format!("cannot write {}", out.display()))?;
    let summary = SolveSummary {
        algorithm: report.algorithm,
        utility: report.utility,
        count: report.count,
        runtime_s: report.runtime_s,
    };
    if json {
        println!("{}", serde_json::to_string(&summary)?);
    } else {
        println!(
            "{}: utility {} with {} of {} acquisitions in {:.3} s",
            summary.algorithm,
            summary.utility,
            summary.count,
            inst.len(),
            summary.runtime_s
        );
    }
    let config = SolveConfig { algo, oracle_limit };
    record(&dir, "solve", &config, vec![inst.seed], inputs, artifacts, started)
}

fn cmd_train(config: Option<&Path>, train_dir: &Path, eval_dir: Option<&Path>, out_dir: &Path, started: Instant) -> Result<()> {
    let cfg = match config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("cannot load config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    let train_paths = instance_paths(&[train_dir.to_path_buf()])?;
    let train_set: Vec<Instance> = load_named(&train_paths)?.into_iter().map(|(_, i)| i).collect();
    let (eval_paths, eval_set) = match eval_dir {
        Some(d) => {
            let p = instance_paths(&[d.to_path_buf()])?;
            let named = load_named(&p)?;
            (p, named)
        }
        None => (vec![], vec![]),
    };
    ensure_dir(out_dir)?;
    let log = |r: &TrainRow| {
        let eval = match (r.eval_utility, r.eval_vs_greedy) {
            (Some(u), Some(g)) => format!(" eval {u:.4} vs greedy {g:.4}"),
            _ => String::new(),
        };
        eprintln!(
            "update {:>4} steps {:>7} return {:.4} entropy {:.4}{eval}",
            r.update, r.env_steps, r.mean_return, r.entropy
        );
    };
    let outcome = train(&train_set, &eval_set, &cfg, log)?;
    let best_path = out_dir.join("checkpoint.bin");
    let last_path = out_dir.join("last.bin");
    let report_path = out_dir.join("train_report.csv");
    outcome.best.save(&best_path)?;
    outcome.last.save(&last_path)?;
    write_train_report(&outcome.rows, &report_path)?;
    println!(
        "trained {} updates; best checkpoint from update {} written to {}",
        outcome.rows.len(),
        outcome.best_update,
        best_path.display()
    );
    let mut inputs = train_paths;
    inputs.extend(eval_paths);
    if let Some(p) = config {
        inputs.push(p.to_path_buf());
    }
    record(
        out_dir,
        "train",
        &cfg,
        vec![cfg.seed],
        inputs,
        vec![best_path, last_path, report_path],
        started,
    )
}

fn cmd_eval(ckpt: &Path, instances: &[PathBuf], report_path: &Path, json: bool, started: Instant) -> Result<()> {
    let params = ParameterSet::load(ckpt).with_context(|| format!("cannot load checkpoint {}", ckpt.display()))?;
    let paths = instance_paths(instances)?;
    let named = load_named(&paths)?;
    let rows = named
        .par_iter()
        .map(|(name, inst)| evaluate_instance(&params, name, inst))
        .collect::<eosp_core::Result<Vec<_>>>()?;
    let report = EvalReport::from_rows(rows)?;
    let format = if json { ReportFormat::Json } else { ReportFormat::Csv };
    let dir = manifest::dir_of(report_path);
    ensure_dir(&dir)?;
    eosp_core::ppo::write_eval_report(&report, report_path, format)?;
    let s = &report.summary;
    println!(
        "{} instances: mean of ratios vs greedy {:.4}, vs RAMP {:.4}; vs greedy {}/{}/{} and vs RAMP {}/{}/{} (above/equal/below)",
        s.instances,
        s.mean_of_ratios_vs_greedy,
        s.mean_of_ratios_vs_ramp,
        s.vs_greedy.above,
        s.vs_greedy.equal,
        s.vs_greedy.below,
        s.vs_ramp.above,
        s.vs_ramp.equal,
        s.vs_ramp.below
    );
    if s.total_policy_violations > 0 {
        eprintln!("warning: {} constraint violation(s) in policy schedules", s.total_policy_violations);
    }
    let mut inputs = paths;
    inputs.push(ckpt.to_path_buf());
    let seeds = named.iter().map(|(_, i)| i.seed).collect();
    record(&dir, "eval", &format!("{format:?}"), seeds, inputs, vec![report_path.to_path_buf()], started)
}

fn cmd_validate(input: &Path, schedule: &Path) -> Result<()> {
    let inst = load_instance(input).with_context(|| format!("cannot load instance {}", input.display()))?;
    let (sched, seed) = load_schedule(schedule).with_context(|| format!("cannot load schedule {}", schedule.display()))?;
    if seed != inst.seed {
        eprintln!("warning: schedule was made for instance seed {seed}, instance has seed {}", inst.seed);
    }
    let violations = validate_schedule(&inst, &sched);
    if violations.is_empty() {
        println!("valid: {} acquisitions scheduled", sched.len());
        return Ok(());
    }
    for v in &violations {
        println!("{v}");
    }
    Err(ValidationFailed(violations.len()).into())
}
