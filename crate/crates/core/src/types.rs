//! Domain types shared by the simulator, the operator, the learner and the
//! teleoperation server.
//!
//! Lengths are in centimetres and angles in radians throughout.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Largest per-step translation on any axis (cm).
pub const MAX_TRANSLATION: f64 = 5.0;
/// Largest per-step gripper-joint increment (rad).
pub const MAX_ROTATION: f64 = 1.0;
/// Number of action dimensions: dx, dy, dz, dtheta.
pub const ACTION_DIM: usize = 4;
/// Number of modes in the partial-automation cycle.
pub const MODE_COUNT: usize = 4;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TypeError {
    #[error("mode index {0} out of range (expected < {MODE_COUNT})")]
    ModeOutOfRange(u8),
    #[error("disturbance variance {value} on dimension {dim} must be finite and >= 0")]
    InvalidVariance { dim: usize, value: f64 },
}

/// One step's command: gripper position deviation and joint-angle deviation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ActionDelta {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub dtheta: f64,
}

impl ActionDelta {
    pub const ZERO: ActionDelta = ActionDelta { dx: 0.0, dy: 0.0, dz: 0.0, dtheta: 0.0 };

    pub const fn new(dx: f64, dy: f64, dz: f64, dtheta: f64) -> Self {
        Self { dx, dy, dz, dtheta }
    }

    pub fn from_array(a: [f64; ACTION_DIM]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn from_slice(a: &[f64]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; ACTION_DIM] {
        [self.dx, self.dy, self.dz, self.dtheta]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Clamps translation to `±translation` and rotation to `±rotation`.
    /// Non-finite components become zero.
    pub fn clamped_to(self, translation: f64, rotation: f64) -> Self {
        let c = |v: f64, lim: f64| if v.is_finite() { v.clamp(-lim, lim) } else { 0.0 };
        Self::new(
            c(self.dx, translation),
            c(self.dy, translation),
            c(self.dz, translation),
            c(self.dtheta, rotation),
        )
    }

    /// Clamps to the global action limits.
    pub fn clamped(self) -> Self {
        self.clamped_to(MAX_TRANSLATION, MAX_ROTATION)
    }

    pub fn sub(self, other: ActionDelta) -> [f64; ACTION_DIM] {
        let (a, b) = (self.to_array(), other.to_array());
        std::array::from_fn(|d| a[d] - b[d])
    }
}

/// Whether a mode is driven by the operator or by a fixed controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModeKind {
    Manual,
    Auto,
}

/// A mode index in `0..MODE_COUNT`. The cycle is 0 → 1 → 2 → 3 → 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Mode(u8);

impl Mode {
    pub const RETURN: Mode = Mode(0);
    pub const REACH: Mode = Mode(1);
    pub const CARRY: Mode = Mode(2);
    pub const PLACE: Mode = Mode(3);

    pub fn new(index: u8) -> Result<Self, TypeError> {
        if (index as usize) < MODE_COUNT {
            Ok(Mode(index))
        } else {
            Err(TypeError::ModeOutOfRange(index))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn next(self) -> Mode {
        Mode(((self.0 as usize + 1) % MODE_COUNT) as u8)
    }

    /// Kind under the default manual-mode set.
    pub fn kind(self) -> ModeKind {
        ManualModes::default().kind(self)
    }

    pub fn is_manual(self) -> bool {
        self.kind() == ModeKind::Manual
    }

    /// True when `to` is reachable from `self` in one step.
    pub fn can_switch_to(self, to: Mode) -> bool {
        to == self || to == self.next()
    }

    pub fn all() -> impl Iterator<Item = Mode> {
        (0..MODE_COUNT as u8).map(Mode)
    }
}

impl TryFrom<u8> for Mode {
    type Error = TypeError;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Mode::new(v)
    }
}

impl From<Mode> for u8 {
    fn from(m: Mode) -> u8 {
        m.0
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The set of mode indices operated manually. The pick-and-place task has two
/// manual modes, reach (1) and place (3).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "Vec<u8>", try_from = "Vec<u8>")]
pub struct ManualModes(u8);

impl ManualModes {
    pub fn from_modes(modes: &[Mode]) -> Self {
        ManualModes(modes.iter().fold(0u8, |acc, m| acc | (1 << m.0)))
    }

    pub fn contains(self, mode: Mode) -> bool {
        self.0 & (1 << mode.0) != 0
    }

    pub fn kind(self, mode: Mode) -> ModeKind {
        if self.contains(mode) {
            ModeKind::Manual
        } else {
            ModeKind::Auto
        }
    }

    pub fn modes(self) -> Vec<Mode> {
        Mode::all().filter(|m| self.contains(*m)).collect()
    }
}

impl Default for ManualModes {
    fn default() -> Self {
        ManualModes::from_modes(&[Mode::REACH, Mode::PLACE])
    }
}

impl From<ManualModes> for Vec<u8> {
    fn from(m: ManualModes) -> Vec<u8> {
        m.modes().into_iter().map(u8::from).collect()
    }
}

impl TryFrom<Vec<u8>> for ManualModes {
    type Error = TypeError;
    fn try_from(v: Vec<u8>) -> Result<Self, Self::Error> {
        let modes = v.into_iter().map(Mode::new).collect::<Result<Vec<_>, _>>()?;
        Ok(ManualModes::from_modes(&modes))
    }
}

/// Diagonal Gaussian disturbance: one variance per action dimension
/// (cm² for translation, rad² for the joint).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceLevel {
    pub sigma: [f64; ACTION_DIM],
    pub iteration_k: u32,
}

impl DisturbanceLevel {
    pub fn zero(iteration_k: u32) -> Self {
        Self { sigma: [0.0; ACTION_DIM], iteration_k }
    }

    pub fn new(sigma: [f64; ACTION_DIM], iteration_k: u32) -> Result<Self, TypeError> {
        for (dim, &value) in sigma.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(TypeError::InvalidVariance { dim, value });
            }
        }
        Ok(Self { sigma, iteration_k })
    }

    pub fn is_zero(&self) -> bool {
        self.sigma.iter().all(|&s| s == 0.0)
    }
}

/// Demonstration regime a trajectory was collected under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Operator switches modes; auto modes run fixed controllers.
    PartialAutomation,
    /// Operator performs the whole task manually; no modes are recorded.
    FullManual,
}

/// One timestep record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub t: usize,
    /// Full-state features observed before the action.
    pub state_full: Vec<f64>,
    /// Operator's command before disturbance.
    pub action_intended: ActionDelta,
    /// What the environment received (after disturbance and clamping).
    pub action_executed: ActionDelta,
    /// Demonstrated mode; `None` for full-manual trajectories.
    pub mode: Option<Mode>,
    pub episode_id: u32,
    pub iteration_k: u32,
}

/// Compact snapshot of the environment at the end of an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSummary {
    pub gripper: [f64; 4],
    pub objects: Vec<[f64; 3]>,
    pub moved_count: usize,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub episode_id: u32,
    pub iteration_k: u32,
    pub seed: u64,
    pub regime: Regime,
    /// Disturbance variance in force while collecting.
    pub sigma: [f64; ACTION_DIM],
    pub steps: Vec<Step>,
    pub terminal: EnvSummary,
    pub success: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Number of transitions that leave the 0→1→2→3→0 cycle. Mode-free
    /// trajectories have none.
    pub fn illegal_transitions(&self) -> usize {
        let mut prev = Mode::RETURN;
        let mut count = 0;
        for step in &self.steps {
            if let Some(m) = step.mode {
                if !prev.can_switch_to(m) {
                    count += 1;
                }
                prev = m;
            }
        }
        count
    }
}
