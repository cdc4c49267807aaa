//! Schedules, their file format, and the independent feasibility checker.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::{transition_unchecked, Instance};

pub const SCHEDULE_FILE_VERSION: &str = "1";

/// Start time per scheduled acquisition; absent ids are unscheduled.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Schedule {
    entries: BTreeMap<usize, f64>,
}

impl Schedule {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: usize, start: f64) {
        self.entries.insert(id, start);
    }

    /// Start time of `id`, or `None` when unscheduled.
    pub fn start(&self, id: usize) -> Option<f64> {
        self.entries.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in id order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.entries.iter().map(|(&id, &t)| (id, t))
    }

    /// Entries sorted by start time (ties by id).
    pub fn chronological(&self) -> Vec<(usize, f64)> {
        let mut v: Vec<_> = self.iter().collect();
        v.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        v
    }

    /// Dense form: `t_i` per candidate, `-1` when unscheduled.
    pub fn to_start_vector(&self, n: usize) -> Vec<f64> {
        (0..n).map(|i| self.start(i).unwrap_or(-1.0)).collect()
    }

    pub fn to_json(&self, instance_seed: u64) -> Result<String> {
        let file = ScheduleFile {
            version: SCHEDULE_FILE_VERSION.into(),
            instance_seed,
            entries: self.iter().map(|(id, start)| ScheduleEntry { id, start }).collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    /// Parses a schedule file, returning the schedule and its instance seed.
    pub fn from_json(text: &str) -> Result<(Schedule, u64)> {
        let file: ScheduleFile = serde_json::from_str(text)?;
        file.into_schedule()
    }
}

impl FromIterator<(usize, f64)> for Schedule {
    fn from_iter<T: IntoIterator<Item = (usize, f64)>>(iter: T) -> Self {
        Schedule {
            entries: iter.into_iter().collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ScheduleFile {
    version: String,
    instance_seed: u64,
    entries: Vec<ScheduleEntry>,
}

#[derive(Serialize, Deserialize)]
struct ScheduleEntry {
    id: usize,
    start: f64,
}

impl ScheduleFile {
    fn into_schedule(self) -> Result<(Schedule, u64)> {
        if self.version != SCHEDULE_FILE_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported schedule version `{}`",
                self.version
            )));
        }
        let mut sched = Schedule::new();
        for e in self.entries {
            if sched.start(e.id).is_some() {
                return Err(Error::InvalidArgument(format!("acquisition {} listed twice", e.id)));
            }
            sched.insert(e.id, e.start);
        }
        Ok((sched, self.instance_seed))
    }
}

pub fn save_schedule(sched: &Schedule, instance_seed: u64, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, sched.to_json(instance_seed)? + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_schedule(path: impl AsRef<Path>) -> Result<(Schedule, u64)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ScheduleFile = serde_json::from_str(&text).map_err(|source| Error::Parse {
        path: path.to_path_buf(),
        source,
    })?;
    file.into_schedule()
}

/// One broken feasibility constraint. Slack is negative by the amount violated.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    UnknownAcquisition {
        id: usize,
    },
    OutsideWindow {
        id: usize,
        start: f64,
        earliest: f64,
        latest: f64,
        slack: f64,
    },
    Transition {
        from: usize,
        to: usize,
        gap: f64,
        required: f64,
        slack: f64,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Violation::UnknownAcquisition { id } => write!(f, "acquisition {id} is not in the instance"),
            Violation::OutsideWindow {
                id,
                start,
                earliest,
                latest,
                slack,
            } => write!(
                f,
                "acquisition {id}: start {start} not in [e, l - d] = [{earliest}, {latest}] (slack {slack})"
            ),
            Violation::Transition {
                from,
                to,
                gap,
                required,
                slack,
            } => write!(
                f,
                "transition {from} -> {to}: t_j - t_i = {gap} < d_i + delta_ij(t_i) = {required} (slack {slack})"
            ),
        }
    }
}

/// Checks window and transition constraints; returns every violation found.
pub fn validate_schedule(inst: &Instance, sched: &Schedule) -> Vec<Violation> {
    let mut out = Vec::new();
    let model = &inst.model;
    let mut timeline = Vec::with_capacity(sched.len());
    for (id, start) in sched.chronological() {
        let Some(a) = inst.acquisitions.get(id) else {
            out.push(Violation::UnknownAcquisition { id });
            continue;
        };
        let latest = a.latest_start();
        if !(start >= a.e && start <= latest) {
            let slack = if start.is_nan() {
                f64::NEG_INFINITY
            } else {
                (start - a.e).min(latest - start)
            };
            out.push(Violation::OutsideWindow {
                id,
                start,
                earliest: a.e,
                latest,
                slack,
            });
        }
        timeline.push((a, start));
    }
    for pair in timeline.windows(2) {
        let (i, t_i) = pair[0];
        let (j, t_j) = pair[1];
        let gap = t_j - t_i;
        let required = i.duration + transition_unchecked(i, t_i, j, model);
        if !(gap >= required) {
            out.push(Violation::Transition {
                from: i.id,
                to: j.id,
                gap,
                required,
                slack: gap - required,
            });
        }
    }
    out
}

/// Total utility of the scheduled acquisitions, summed in id order.
pub fn schedule_utility(inst: &Instance, sched: &Schedule) -> f64 {
    sched
        .iter()
        .filter_map(|(id, _)| inst.acquisitions.get(id))
        .map(|a| a.utility)
        .sum()
}
