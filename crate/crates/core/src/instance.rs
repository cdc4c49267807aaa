//! Problem instances: candidate acquisitions, the attitude model that induces
//! time-dependent transition durations, utilities, and a seeded generator.
//!
//! Pointing follows a linear law: an acquisition whose target passes nadir at
//! along-track time `x` is seen at pitch `kappa_p * (x - t)` at time `t`. Its
//! visibility window is the interval on which that pitch stays within
//! `±pitch_max`, clipped to the horizon. A maneuver between two attitudes
//! costs a fixed settle time plus the Euclidean (roll, pitch) distance divided
//! by the slew rate.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Value of each priority class, lowest to highest.
pub const CLASS_VALUES: [f64; 7] = [1.0, 10.0, 1e2, 1e3, 1e4, 1e6, 1e8];

/// Relative bonus granted to a perfectly clear sky.
pub const CLOUD_BONUS: f64 = 0.05;

/// Roll is drawn in `[-MAX_ROLL, MAX_ROLL]` degrees.
pub const MAX_ROLL: f64 = 30.0;

pub const INSTANCE_FILE_VERSION: &str = "1";

/// Which quantity a schedule maximizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Every acquisition is worth 1: maximize the number scheduled.
    Unitary,
    /// Priority-class utilities with a cloud-cover bonus.
    Utility,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unitary" => Ok(Objective::Unitary),
            "utility" => Ok(Objective::Utility),
            other => Err(Error::InvalidArgument(format!(
                "unknown objective `{other}` (expected `unitary` or `utility`)"
            ))),
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Objective::Unitary => "unitary",
            Objective::Utility => "utility",
        })
    }
}

/// Synthetic satellite attitude and maneuver model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttitudeModel {
    /// Planning horizon in seconds.
    pub tau: f64,
    /// Pitch rate of the linear pointing law, degrees per second.
    pub kappa_p: f64,
    /// Largest usable pitch, degrees.
    pub pitch_max: f64,
    /// Slew rate, degrees per second.
    pub omega: f64,
    /// Stabilization delay added to every maneuver, seconds.
    pub settle: f64,
    /// Time step of the discrete graph, seconds.
    pub delta: f64,
}

impl Default for AttitudeModel {
    fn default() -> Self {
        AttitudeModel {
            tau: 6000.0,
            kappa_p: 0.5,
            pitch_max: 30.0,
            omega: 1.5,
            settle: 3.0,
            delta: 1.0,
        }
    }
}

impl AttitudeModel {
    /// Half-width of an unclipped visibility window.
    pub fn half_window(&self) -> f64 {
        self.pitch_max / self.kappa_p
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("tau", self.tau),
            ("kappa_p", self.kappa_p),
            ("pitch_max", self.pitch_max),
            ("omega", self.omega),
            ("settle", self.settle),
            ("delta", self.delta),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidModel(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        if self.delta > self.tau {
            return Err(Error::InvalidModel(format!(
                "delta ({}) exceeds the horizon ({})",
                self.delta, self.tau
            )));
        }
        if self.half_window() >= self.tau / 2.0 {
            return Err(Error::InvalidModel(format!(
                "pitch_max / kappa_p ({}) must be below tau / 2 ({})",
                self.half_window(),
                self.tau / 2.0
            )));
        }
        Ok(())
    }

    /// Visibility window `[e, l]` of a target passing nadir at `x`.
    pub fn window(&self, x: f64) -> (f64, f64) {
        let hw = self.half_window();
        ((x - hw).max(0.0), (x + hw).min(self.tau))
    }

    /// Duration of a maneuver between two (roll, pitch) attitudes.
    pub fn slew_duration(&self, from: (f64, f64), to: (f64, f64)) -> f64 {
        let dr = to.0 - from.0;
        let dp = to.1 - from.1;
        self.settle + (dr * dr + dp * dp).sqrt() / self.omega
    }
}

/// One candidate observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Acquisition {
    pub id: usize,
    /// Along-track time at which the target passes nadir.
    pub x: f64,
    /// Roll angle needed to see the target, degrees.
    pub roll: f64,
    pub duration: f64,
    /// Window opening.
    pub e: f64,
    /// Window closing.
    pub l: f64,
    pub class: u8,
    pub cloud: f64,
    pub utility: f64,
}

impl Acquisition {
    /// Builds an acquisition whose window and utility follow from the model.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: usize,
        x: f64,
        roll: f64,
        duration: f64,
        class: u8,
        cloud: f64,
        objective: Objective,
        model: &AttitudeModel,
    ) -> Result<Self> {
        let (e, l) = model.window(x);
        let utility = utility_value(class, cloud, objective)?;
        Ok(Acquisition {
            id,
            x,
            roll,
            duration,
            e,
            l,
            class,
            cloud,
            utility,
        })
    }

    /// Latest feasible start time.
    pub fn latest_start(&self) -> f64 {
        self.l - self.duration
    }

    fn validate(&self, model: &AttitudeModel) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInstance(format!("acquisition {}: {msg}", self.id)));
        let finite = [
            ("x", self.x),
            ("roll", self.roll),
            ("duration", self.duration),
            ("e", self.e),
            ("l", self.l),
            ("cloud", self.cloud),
            ("utility", self.utility),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return bad(format!("{name} is not finite"));
            }
        }
        if self.l < self.e {
            return bad(format!("l ({}) < e ({})", self.l, self.e));
        }
        if self.e < 0.0 {
            return bad(format!("e ({}) < 0", self.e));
        }
        if self.l > model.tau {
            return bad(format!("l ({}) exceeds the horizon ({})", self.l, model.tau));
        }
        if !(self.duration > 0.0) {
            return bad(format!("duration ({}) must be > 0", self.duration));
        }
        if self.l - self.e < self.duration {
            return bad(format!(
                "window [{}, {}] is shorter than the duration {}",
                self.e, self.l, self.duration
            ));
        }
        if !(self.utility > 0.0) {
            return bad(format!("utility ({}) must be > 0", self.utility));
        }
        if self.class as usize >= CLASS_VALUES.len() {
            return bad(format!("class {} outside 0..=6", self.class));
        }
        if !(0.0..=1.0).contains(&self.cloud) {
            return bad(format!("cloud ({}) outside [0, 1]", self.cloud));
        }
        let (e, l) = model.window(self.x);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
        if !close(e, self.e) || !close(l, self.l) {
            return bad(format!(
                "window [{}, {}] disagrees with the pointing law, expected [{e}, {l}]",
                self.e, self.l
            ));
        }
        Ok(())
    }
}

/// Pitch at which `acq`'s target is seen at time `t` (unclipped).
pub fn pitch_at(acq: &Acquisition, t: f64, model: &AttitudeModel) -> f64 {
    model.kappa_p * (acq.x - t)
}

/// Maneuver time between the end of `i` (started at `t_i`) and the start of `j`.
///
/// Both attitudes are evaluated at the instant `i` ends, so the result is a
/// function of `t_i` only.
pub fn transition_duration(
    i: &Acquisition,
    t_i: f64,
    j: &Acquisition,
    model: &AttitudeModel,
) -> Result<f64> {
    if i.id == j.id {
        return Err(Error::Contract(format!("self-transition on acquisition {}", i.id)));
    }
    Ok(transition_unchecked(i, t_i, j, model))
}

#[inline]
pub(crate) fn transition_unchecked(i: &Acquisition, t_i: f64, j: &Acquisition, model: &AttitudeModel) -> f64 {
    let t_end = t_i + i.duration;
    model.slew_duration(
        (i.roll, pitch_at(i, t_end, model)),
        (j.roll, pitch_at(j, t_end, model)),
    )
}

/// Earliest time `t` at which `j` may start after `i` started at `t_i`.
///
/// Rounded up so that `t - t_i >= d_i + delta_ij(t_i)` holds when evaluated
/// in floating point, which is how schedules are validated.
pub fn ready_time(i: &Acquisition, t_i: f64, j: &Acquisition, model: &AttitudeModel) -> f64 {
    let required = i.duration + transition_unchecked(i, t_i, j, model);
    let mut t = t_i + required;
    while t - t_i < required {
        t = next_up(t);
    }
    t
}

fn next_up(t: f64) -> f64 {
    if t == 0.0 {
        f64::from_bits(1)
    } else if t > 0.0 {
        f64::from_bits(t.to_bits() + 1)
    } else {
        f64::from_bits(t.to_bits() - 1)
    }
}

/// Maneuver time from the nadir-pointing origin (time 0, zero duration) to `j`.
pub fn origin_transition_duration(j: &Acquisition, model: &AttitudeModel) -> f64 {
    model.slew_duration((0.0, 0.0), (j.roll, pitch_at(j, 0.0, model)))
}

/// Utility of an acquisition of the given priority class and cloud fraction.
pub fn utility_value(class: u8, cloud: f64, objective: Objective) -> Result<f64> {
    let Some(&base) = CLASS_VALUES.get(class as usize) else {
        return Err(Error::InvalidArgument(format!("priority class {class} outside 0..=6")));
    };
    if !(0.0..=1.0).contains(&cloud) {
        return Err(Error::InvalidArgument(format!("cloud fraction {cloud} outside [0, 1]")));
    }
    Ok(match objective {
        Objective::Unitary => 1.0,
        Objective::Utility => base * (1.0 + CLOUD_BONUS * (1.0 - cloud)),
    })
}

/// A complete problem: model plus candidates with ids `0..n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub seed: u64,
    pub objective: Objective,
    pub model: AttitudeModel,
    pub acquisitions: Vec<Acquisition>,
}

impl Instance {
    /// Assembles and validates an instance.
    pub fn new(
        seed: u64,
        objective: Objective,
        model: AttitudeModel,
        acquisitions: Vec<Acquisition>,
    ) -> Result<Self> {
        let inst = Instance {
            seed,
            objective,
            model,
            acquisitions,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn len(&self) -> usize {
        self.acquisitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acquisitions.is_empty()
    }

    pub fn acquisition(&self, id: usize) -> &Acquisition {
        &self.acquisitions[id]
    }

    /// Arithmetic mean utility over every candidate.
    pub fn mean_utility(&self) -> f64 {
        if self.acquisitions.is_empty() {
            return 1.0;
        }
        self.acquisitions.iter().map(|a| a.utility).sum::<f64>() / self.acquisitions.len() as f64
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for (pos, a) in self.acquisitions.iter().enumerate() {
            if a.id != pos {
                return Err(Error::InvalidInstance(format!(
                    "acquisition at position {pos} has id {}; ids must be 0..n without gaps",
                    a.id
                )));
            }
            a.validate(&self.model)?;
            if self.objective == Objective::Unitary && a.utility != 1.0 {
                return Err(Error::InvalidInstance(format!(
                    "acquisition {}: unitary instances require utility 1, got {}",
                    a.id, a.utility
                )));
            }
        }
        Ok(())
    }

    /// Same candidates scored under another objective.
    pub fn with_objective(&self, objective: Objective) -> Result<Instance> {
        let acquisitions = self
            .acquisitions
            .iter()
            .map(|a| {
                Ok(Acquisition {
                    utility: utility_value(a.class, a.cloud, objective)?,
                    ..*a
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Instance::new(self.seed, objective, self.model, acquisitions)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = InstanceFile {
            version: INSTANCE_FILE_VERSION.to_string(),
            seed: self.seed,
            objective: self.objective,
            model: self.model,
            acquisitions: self.acquisitions.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Instance> {
        let file: InstanceFile = serde_json::from_str(text)?;
        file.into_instance()
    }
}

#[derive(Serialize, Deserialize)]
struct InstanceFile {
    version: String,
    seed: u64,
    objective: Objective,
    model: AttitudeModel,
    acquisitions: Vec<Acquisition>,
}

impl InstanceFile {
    fn into_instance(self) -> Result<Instance> {
        if self.version != INSTANCE_FILE_VERSION {
            return Err(Error::InvalidInstance(format!(
                "unsupported version `{}`",
                self.version
            )));
        }
        Instance::new(self.seed, self.objective, self.model, self.acquisitions)
    }
}

/// Draws `n` candidates uniformly over the horizon.
///
/// Windows clipped by the horizon that end up shorter than the drawn duration
/// are redrawn, so every candidate can be scheduled on its own.
pub fn generate_instance(
    n: usize,
    seed: u64,
    model: &AttitudeModel,
    objective: Objective,
) -> Result<Instance> {
    if n == 0 {
        return Err(Error::InvalidArgument("cannot generate an instance with 0 acquisitions".into()));
    }
    model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acquisitions = Vec::with_capacity(n);
    while acquisitions.len() < n {
        let x = rng.gen_range(0.0..model.tau);
        let roll = rng.gen_range(-MAX_ROLL..MAX_ROLL);
        let duration = rng.gen_range(2.0..8.0);
        let cloud = rng.gen_range(0.0..1.0);
        let class = rng.gen_range(0..CLASS_VALUES.len() as u8);
        let (e, l) = model.window(x);
        if l - e < duration {
            continue;
        }
        let acq = Acquisition::new(acquisitions.len(), x, roll, duration, class, cloud, objective, model)?;
        acquisitions.push(acq);
    }
    Instance::new(seed, objective, *model, acquisitions)
}

pub fn save_instance(inst: &Instance, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, inst.to_json()? + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_instance(path: impl AsRef<Path>) -> Result<Instance> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: InstanceFile = serde_json::from_str(&text).map_err(|source| Error::Parse {
        path: path.to_path_buf(),
        source,
    })?;
    file.into_instance()
}
