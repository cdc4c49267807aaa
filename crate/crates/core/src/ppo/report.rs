//! Argmax evaluation against the classical baselines.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::instance::Instance;
use crate::policy::{policy_schedule, ParameterSet};
use crate::schedule::validate_schedule;
use crate::solvers::{greedy_schedule, ramp_schedule};

/// Scores of one instance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub instance: String,
    pub acquisitions: usize,
    pub policy_utility: f64,
    pub greedy_utility: f64,
    pub ramp_utility: f64,
    pub policy_count: usize,
    pub greedy_count: usize,
    pub ramp_count: usize,
    /// `policy_utility / greedy_utility`, 1 when both are 0.
    pub ratio_vs_greedy: f64,
    pub ratio_vs_ramp: f64,
    /// Constraint violations found in the policy schedule.
    pub policy_violations: usize,
}

/// How often the policy scored above, equal to or below a baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct WinTieLoss {
    pub above: usize,
    pub equal: usize,
    pub below: usize,
}

impl WinTieLoss {
    fn record(&mut self, policy: f64, baseline: f64) {
        if policy > baseline {
            self.above += 1;
        } else if policy == baseline {
            self.equal += 1;
        } else {
            self.below += 1;
        }
    }
}

/// Aggregates over all rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalSummary {
    pub instances: usize,
    pub mean_policy_utility: f64,
    pub mean_greedy_utility: f64,
    pub mean_ramp_utility: f64,
    pub mean_policy_count: f64,
    pub mean_greedy_count: f64,
    pub mean_ramp_count: f64,
    /// Mean of per-instance ratios, not the ratio of means.
    pub mean_of_ratios_vs_greedy: f64,
    pub mean_of_ratios_vs_ramp: f64,
    pub vs_greedy: WinTieLoss,
    pub vs_ramp: WinTieLoss,
    pub total_policy_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub summary: EvalSummary,
}

fn ratio(policy: f64, baseline: f64) -> f64 {
    if baseline == 0.0 && policy == 0.0 {
        1.0
    } else {
        policy / baseline
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n as f64
}

impl EvalReport {
    /// Builds the summary; fails on an empty row set.
    pub fn from_rows(rows: Vec<EvalRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("evaluation report has no instances".into()));
        }
        let mut vs_greedy = WinTieLoss::default();
        let mut vs_ramp = WinTieLoss::default();
        for r in &rows {
            vs_greedy.record(r.policy_utility, r.greedy_utility);
            vs_ramp.record(r.policy_utility, r.ramp_utility);
        }
        let summary = EvalSummary {
            instances: rows.len(),
            mean_policy_utility: mean(rows.iter().map(|r| r.policy_utility)),
            mean_greedy_utility: mean(rows.iter().map(|r| r.greedy_utility)),
            mean_ramp_utility: mean(rows.iter().map(|r| r.ramp_utility)),
            mean_policy_count: mean(rows.iter().map(|r| r.policy_count as f64)),
            mean_greedy_count: mean(rows.iter().map(|r| r.greedy_count as f64)),
            mean_ramp_count: mean(rows.iter().map(|r| r.ramp_count as f64)),
            mean_of_ratios_vs_greedy: mean(rows.iter().map(|r| r.ratio_vs_greedy)),
            mean_of_ratios_vs_ramp: mean(rows.iter().map(|r| r.ratio_vs_ramp)),
            vs_greedy,
            vs_ramp,
            total_policy_violations: rows.iter().map(|r| r.policy_violations).sum(),
        };
        Ok(EvalReport { rows, summary })
    }
}

/// Baseline scores of held-out instances, computed once per training run.
pub(crate) struct Baselines<'a> {
    instances: &'a [(String, Instance)],
    greedy: Vec<f64>,
    ramp: Vec<f64>,
}

pub(crate) struct QuickScore {
    pub normalized_utility: f64,
    pub vs_greedy: f64,
    pub vs_ramp: f64,
}

impl<'a> Baselines<'a> {
    pub fn compute(instances: &'a [(String, Instance)]) -> Self {
        Baselines {
            instances,
            greedy: instances.iter().map(|(_, i)| greedy_schedule(i).utility).collect(),
            ramp: instances.iter().map(|(_, i)| ramp_schedule(i).utility).collect(),
        }
    }

    pub fn score(&self, params: &ParameterSet) -> Result<QuickScore> {
        let mut norm = Vec::with_capacity(self.instances.len());
        let mut vs_greedy = Vec::with_capacity(self.instances.len());
        let mut vs_ramp = Vec::with_capacity(self.instances.len());
        for (k, (_, inst)) in self.instances.iter().enumerate() {
            let u = policy_schedule(params, inst)?.utility;
            norm.push(u / inst.mean_utility());
            vs_greedy.push(ratio(u, self.greedy[k]));
            vs_ramp.push(ratio(u, self.ramp[k]));
        }
        Ok(QuickScore {
            normalized_utility: mean(norm.into_iter()),
            vs_greedy: mean(vs_greedy.into_iter()),
            vs_ramp: mean(vs_ramp.into_iter()),
        })
    }
}

/// Scores one instance with the argmax policy and both baselines.
pub fn evaluate_instance(params: &ParameterSet, name: &str, inst: &Instance) -> Result<EvalRow> {
    let policy = policy_schedule(params, inst)?;
    let greedy = greedy_schedule(inst);
    let ramp = ramp_schedule(inst);
    Ok(EvalRow {
        instance: name.to_string(),
        acquisitions: inst.len(),
        policy_utility: policy.utility,
        greedy_utility: greedy.utility,
        ramp_utility: ramp.utility,
        policy_count: policy.count,
        greedy_count: greedy.count,
        ramp_count: ramp.count,
        ratio_vs_greedy: ratio(policy.utility, greedy.utility),
        ratio_vs_ramp: ratio(policy.utility, ramp.utility),
        policy_violations: validate_schedule(inst, &policy.schedule).len(),
    })
}

/// Argmax evaluation of `params` on named instances.
pub fn evaluate_policy(params: &ParameterSet, instances: &[(String, Instance)]) -> Result<EvalReport> {
    if instances.is_empty() {
        return Err(Error::InvalidArgument("no instances to evaluate".into()));
    }
    let rows = instances
        .iter()
        .map(|(name, inst)| evaluate_instance(params, name, inst))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_rows(rows)
}

/// Output format of [`write_eval_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    /// One row per instance, then a `mean` row (ratio columns are means of
    /// per-instance ratios) and `above`, `equal`, `below` rows whose ratio
    /// columns count wins, ties and losses against each baseline.
    Csv,
    /// The whole [`EvalReport`].
    Json,
}

/// Writes `report` to `path`.
pub fn write_eval_report(report: &EvalReport, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let path = path.as_ref();
    if report.rows.is_empty() {
        return Err(Error::InvalidArgument("evaluation report has no instances".into()));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    match format {
        ReportFormat::Json => {
            serde_json::to_writer_pretty(file, report)?;
            Ok(())
        }
        ReportFormat::Csv => write_csv(report, file).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        }),
    }
}

fn write_csv(report: &EvalReport, out: std::fs::File) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in &report.rows {
        w.serialize(r)?;
    }
    let s = &report.summary;
    let f = |x: f64| x.to_string();
    w.write_record([
        "mean".to_string(),
        String::new(),
        f(s.mean_policy_utility),
        f(s.mean_greedy_utility),
        f(s.mean_ramp_utility),
        f(s.mean_policy_count),
        f(s.mean_greedy_count),
        f(s.mean_ramp_count),
        f(s.mean_of_ratios_vs_greedy),
        f(s.mean_of_ratios_vs_ramp),
        s.total_policy_violations.to_string(),
    ])?;
    for (label, g, r) in [
        ("above", s.vs_greedy.above, s.vs_ramp.above),
        ("equal", s.vs_greedy.equal, s.vs_ramp.equal),
        ("below", s.vs_greedy.below, s.vs_ramp.below),
    ] {
        let mut rec = vec![String::new(); 11];
        rec[0] = label.into();
        rec[8] = g.to_string();
        rec[9] = r.to_string();
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<report>", e))?;
    Ok(())
}
