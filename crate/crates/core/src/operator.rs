//! Algorithmic operator: proportional manual controller, rule-based mode
//! switching, fixed automatic controllers and the disturbance injector.

use crate::env::{horizontal_dist, EnvConfig, EnvState, BLUE_X};
use crate::rng::RngStream;
use crate::types::{ActionDelta, DisturbanceLevel, Mode, ACTION_DIM, MAX_ROTATION, MAX_TRANSLATION};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Gripper X at or below which the return mode hands over to reaching.
pub const REACH_ENTRY_X: f64 = -15.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OperatorError {
    #[error("mode {0} is not an automatic mode")]
    NotAuto(Mode),
    #[error("mode {0} is not a manual mode")]
    NotManual(Mode),
    #[error("no target for mode {mode}: {reason}")]
    NoTarget { mode: Mode, reason: &'static str },
    #[error("invalid operator config: {0}")]
    Config(String),
    #[error(transparent)]
    Disturbance(#[from] crate::types::TypeError),
}

/// Which action becomes the training label for a manual step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// The operator's command before disturbance.
    #[default]
    Intended,
    /// The disturbed, clamped action the environment received.
    Executed,
}

impl LabelSource {
    pub fn pick(self, step: &crate::types::Step) -> ActionDelta {
        match self {
            LabelSource::Intended => step.action_intended,
            LabelSource::Executed => step.action_executed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorConfig {
    /// Proportional gain (1/step).
    pub kp: f64,
    /// Per-axis translation clamp (cm).
    pub clamp: f64,
    pub label_source: LabelSource,
    /// Horizontal tolerance for closing over an object or opening over a
    /// slot (cm).
    pub align_tol: f64,
    /// Gripper command magnitude (rad/step). The gripper is driven open or
    /// closed at this constant rate, chosen from position alone.
    pub grip_rate: f64,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        Self { kp: 0.5, clamp: 1.0, label_source: LabelSource::Intended, align_tol: 1.0, grip_rate: 0.5 }
    }
}

impl OperatorConfig {
    pub fn validate(&self) -> Result<(), OperatorError> {
        if !(self.kp > 0.0 && self.kp.is_finite()) {
            return Err(OperatorError::Config("kp must be > 0".into()));
        }
        if !(self.clamp > 0.0 && self.clamp <= MAX_TRANSLATION) {
            return Err(OperatorError::Config(format!("clamp must be in (0, {MAX_TRANSLATION}]")));
        }
        if !(self.align_tol > 0.0) {
            return Err(OperatorError::Config("align_tol must be > 0".into()));
        }
        if !(self.grip_rate > 0.0 && self.grip_rate <= MAX_ROTATION) {
            return Err(OperatorError::Config(format!("grip_rate must be in (0, {MAX_ROTATION}]")));
        }
        Ok(())
    }
}

/// Fixed controller for an automatic mode.
///
/// Return (0) moves left while opening; carry (2) moves right and up while
/// closing.
pub fn auto_action(mode: Mode) -> Result<ActionDelta, OperatorError> {
    match mode {
        Mode::RETURN => Ok(ActionDelta::new(-5.0, 0.0, 0.0, 1.0)),
        Mode::CARRY => Ok(ActionDelta::new(5.0, 0.0, 3.0, -1.0)),
        other => Err(OperatorError::NotAuto(other)),
    }
}

/// Adds `ε ~ N(0, diag(sigma))` to `intended` and clamps the result.
///
/// Four normal draws are consumed on every call, including when `sigma` is
/// zero, so streams stay aligned across disturbance levels.
pub fn inject_disturbance(
    intended: ActionDelta,
    sigma: &DisturbanceLevel,
    rng: &mut RngStream,
) -> Result<ActionDelta, OperatorError> {
    DisturbanceLevel::new(sigma.sigma, sigma.iteration_k)?;
    let base = intended.to_array();
    let noisy: [f64; ACTION_DIM] = std::array::from_fn(|d| {
        let z: f64 = StandardNormal.sample(rng);
        if sigma.sigma[d] > 0.0 {
            base[d] + sigma.sigma[d].sqrt() * z
        } else {
            base[d]
        }
    });
    Ok(ActionDelta::from_array(noisy).clamped())
}

#[derive(Debug, Clone)]
pub struct Operator {
    config: OperatorConfig,
    env: EnvConfig,
}

impl Operator {
    pub fn new(config: OperatorConfig, env: EnvConfig) -> Result<Self, OperatorError> {
        config.validate()?;
        Ok(Self { config, env })
    }

    pub fn config(&self) -> &OperatorConfig {
        &self.config
    }

    pub fn env_config(&self) -> &EnvConfig {
        &self.env
    }

    /// Proportional step toward `target`; the gripper opens (`open`) or
    /// closes at the configured rate.
    fn track(&self, state: &EnvState, target: [f64; 3], open: bool) -> ActionDelta {
        let g = &state.gripper;
        let p = |err: f64| (self.config.kp * err).clamp(-self.config.clamp, self.config.clamp);
        ActionDelta::new(
            p(target[0] - g.x),
            p(target[1] - g.y),
            p(target[2] - g.z),
            if open { self.config.grip_rate } else { -self.config.grip_rate },
        )
    }

    /// Operator's intended command in a manual mode, before disturbance.
    ///
    /// Reach (1) tracks the nearest free object and closes once over it;
    /// place (3) tracks the carried object's blue slot at the current height
    /// and opens once over it. Elsewhere the gripper is held open while
    /// reaching and closed while placing.
    pub fn manual_action(&self, state: &EnvState, mode: Mode) -> Result<ActionDelta, OperatorError> {
        let g = &state.gripper;
        let tol = self.config.align_tol;
        match mode {
            Mode::REACH => {
                let target = state
                    .objects
                    .iter()
                    .filter(|o| !o.placed && !o.attached)
                    .min_by(|a, b| {
                        horizontal_dist(a.pos, g.x, g.y).total_cmp(&horizontal_dist(b.pos, g.x, g.y))
                    })
                    .ok_or(OperatorError::NoTarget { mode, reason: "no free object left" })?;
                // Closing starts as soon as the gripper is over the object and
                // is held while it descends.
                let over = horizontal_dist(target.pos, g.x, g.y) <= tol;
                Ok(self.track(state, target.pos, !over))
            }
            Mode::PLACE => {
                let i = state.attached().ok_or(OperatorError::NoTarget { mode, reason: "nothing attached" })?;
                // Released objects drop straight down, so height is held.
                let slot = [BLUE_X, state.objects[i].slot_y, g.z];
                let over = horizontal_dist(slot, g.x, g.y) <= tol;
                Ok(self.track(state, slot, over))
            }
            other => Err(OperatorError::NotManual(other)),
        }
    }

    /// Mode for the coming step, given the mode in force (`state.mode`).
    /// Advances at most one position along the cycle.
    pub fn switch_mode(&self, state: &EnvState) -> Mode {
        let done = match state.mode {
            Mode::RETURN => state.gripper.x <= REACH_ENTRY_X,
            Mode::REACH => state.attached().is_some(),
            Mode::CARRY => state.gripper.x >= self.env.auto2_threshold.x(),
            _ => {
                state.attached().is_none()
                    && state.last_carried.is_some_and(|i| state.objects[i].placed)
            }
        };
        if done {
            state.mode.next()
        } else {
            state.mode
        }
    }

    /// Single controller for the whole task without modes: the same four
    /// phase behaviours, selected from the state alone.
    pub fn full_manual_action(&self, state: &EnvState) -> Result<ActionDelta, OperatorError> {
        match state.attached() {
            Some(_) if state.gripper.x >= self.env.auto2_threshold.x() => self.manual_action(state, Mode::PLACE),
            Some(_) => auto_action(Mode::CARRY),
            None if state.gripper.x <= REACH_ENTRY_X => self.manual_action(state, Mode::REACH),
            None => auto_action(Mode::RETURN),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Gripper, PickPlaceEnv, Threshold};
    use crate::rng::episode_path;

    fn setup(n: usize, thr: Threshold) -> (PickPlaceEnv, Operator) {
        let mut c = EnvConfig::with_objects(n);
        c.auto2_threshold = thr;
        (PickPlaceEnv::new(c.clone()).unwrap(), Operator::new(OperatorConfig::default(), c).unwrap())
    }

    fn rng(seed: u64, purpose: &str) -> RngStream {
        RngStream::derive(seed, &episode_path(1, 1, purpose)).unwrap()
    }

    #[test]
    fn auto_constants() {
        assert_eq!(auto_action(Mode::RETURN).unwrap(), ActionDelta::new(-5.0, 0.0, 0.0, 1.0));
        assert_eq!(auto_action(Mode::CARRY).unwrap(), ActionDelta::new(5.0, 0.0, 3.0, -1.0));
        assert_eq!(auto_action(Mode::REACH).unwrap_err(), OperatorError::NotAuto(Mode::REACH));
    }

    #[test]
    fn proportional_arithmetic() {
        let (env, op) = setup(1, Threshold::L);
        let mut s = env.reset(&mut rng(1, "reset"));
        s.objects[0].pos = [-20.0, 0.0, 0.0];
        // error (10, 0, 0): min(0.5·10, 1) = 1
        s.gripper = Gripper { x: -30.0, y: 0.0, z: 0.0, theta: 1.0 };
        assert_eq!(op.manual_action(&s, Mode::REACH).unwrap().dx, 1.0);
        // error (−1, 0.5, 0) → (−0.5, 0.25, 0)
        s.gripper = Gripper { x: -19.0, y: -0.5, z: 0.0, theta: 1.0 };
        let a = op.manual_action(&s, Mode::REACH).unwrap();
        assert_eq!((a.dx, a.dy, a.dz), (-0.5, 0.25, 0.0));
        // at target: zero translation, closing
        s.gripper = Gripper { x: -20.0, y: 0.0, z: 0.0, theta: 1.0 };
        let a = op.manual_action(&s, Mode::REACH).unwrap();
        assert_eq!((a.dx, a.dy, a.dz, a.dtheta), (0.0, 0.0, 0.0, -0.5));
    }

    #[test]
    fn proportional_arithmetic_with_wide_clamp() {
        let c = EnvConfig::with_objects(1);
        let env = PickPlaceEnv::new(c.clone()).unwrap();
        let op = Operator::new(OperatorConfig { clamp: 5.0, ..OperatorConfig::default() }, c).unwrap();
        let mut s = env.reset(&mut rng(1, "reset"));
        s.objects[0].pos = [-20.0, 0.0, 0.0];
        // error (10, 0, 0): min(0.5·10, 5) = 5
        s.gripper = Gripper { x: -30.0, y: 0.0, z: 0.0, theta: 1.0 };
        assert_eq!(op.manual_action(&s, Mode::REACH).unwrap().dx, 5.0);
        // error (−4, 2, 0) → (−2, 1, 0)
        s.gripper = Gripper { x: -16.0, y: -2.0, z: 0.0, theta: 1.0 };
        let a = op.manual_action(&s, Mode::REACH).unwrap();
        assert_eq!((a.dx, a.dy, a.dz), (-2.0, 1.0, 0.0));
    }

    #[test]
    fn reach_without_free_object_faults() {
        let (env, op) = setup(1, Threshold::L);
        let mut s = env.reset(&mut rng(1, "reset"));
        s.objects[0].placed = true;
        assert!(matches!(op.manual_action(&s, Mode::REACH), Err(OperatorError::NoTarget { .. })));
        assert!(matches!(op.manual_action(&s, Mode::PLACE), Err(OperatorError::NoTarget { .. })));
        assert_eq!(op.manual_action(&s, Mode::CARRY).unwrap_err(), OperatorError::NotManual(Mode::CARRY));
    }

    #[test]
    fn switch_rules() {
        let (env, op) = setup(1, Threshold::L);
        let mut s = env.reset(&mut rng(1, "reset"));
        s.mode = Mode::CARRY;
        s.gripper.x = 16.0;
        assert_eq!(op.switch_mode(&s), Mode::PLACE);
        s.gripper.x = 14.0;
        assert_eq!(op.switch_mode(&s), Mode::CARRY);
        s.mode = Mode::REACH;
        assert_eq!(op.switch_mode(&s), Mode::REACH);
        s.mode = Mode::PLACE;
        s.objects[0].placed = true;
        s.last_carried = Some(0);
        assert_eq!(op.switch_mode(&s), Mode::RETURN);
        s.mode = Mode::RETURN;
        s.gripper.x = -15.0;
        assert_eq!(op.switch_mode(&s), Mode::REACH);
    }

    #[test]
    fn zero_sigma_injection_is_identity() {
        let mut r = rng(3, "noise");
        let a = ActionDelta::new(1.5, -0.25, 3.0, -1.0);
        for _ in 0..100 {
            assert_eq!(inject_disturbance(a, &DisturbanceLevel::zero(1), &mut r).unwrap(), a);
        }
    }

    #[test]
    fn negative_sigma_rejected() {
        let bad = DisturbanceLevel { sigma: [-1.0, 0.0, 0.0, 0.0], iteration_k: 2 };
        assert!(inject_disturbance(ActionDelta::ZERO, &bad, &mut rng(3, "noise")).is_err());
    }

    #[test]
    fn injected_std_matches_sigma() {
        // Σ = 0.04 → std 0.2; from an interior command clamping never binds.
        // The standard error of a 10⁵-sample std estimate is ≈ 0.2/√(2·10⁵)
        // ≈ 4.5e−4, far inside [0.19, 0.21].
        let sigma = DisturbanceLevel::new([0.04; 4], 2).unwrap();
        let base = ActionDelta::new(0.0, 0.0, 0.0, 0.0);
        let mut r = rng(9, "noise");
        let n = 100_000;
        let mut sums = [0.0; 4];
        let mut sq = [0.0; 4];
        for _ in 0..n {
            let e = inject_disturbance(base, &sigma, &mut r).unwrap().sub(base);
            for d in 0..4 {
                sums[d] += e[d];
                sq[d] += e[d] * e[d];
            }
        }
        for d in 0..4 {
            let m = sums[d] / n as f64;
            let sd = (sq[d] / n as f64 - m * m).sqrt();
            assert!((0.19..=0.21).contains(&sd), "dim {d}: std {sd}");
        }
    }

    fn run_episode(env: &PickPlaceEnv, op: &Operator, seed: u64) -> (bool, Vec<(EnvState, ActionDelta)>) {
        let mut s = env.reset(&mut rng(seed, "reset"));
        let mut log = Vec::new();
        while !env.is_done(&s) {
            s.mode = op.switch_mode(&s);
            let a = if s.mode.is_manual() { op.manual_action(&s, s.mode).unwrap() } else { auto_action(s.mode).unwrap() };
            log.push((s.clone(), a));
            s = env.step(&s, a);
        }
        (env.is_success(&s), log)
    }

    #[test]
    fn operator_competence_all_thresholds() {
        for n in 1..=3 {
            for thr in [Threshold::L, Threshold::M, Threshold::S] {
                let (env, op) = setup(n, thr);
                let wins = (0..100).filter(|&seed| run_episode(&env, &op, seed).0).count();
                assert!(wins >= 99, "n={n} thr={thr:?}: {wins}/100");
            }
        }
    }

    #[test]
    fn full_manual_matches_phased_operator() {
        for thr in [Threshold::L, Threshold::M, Threshold::S] {
            let (env, op) = setup(3, thr);
            for seed in 0..10 {
                let (_, log) = run_episode(&env, &op, seed);
                for (s, a) in &log {
                    assert_eq!(op.full_manual_action(s).unwrap(), *a, "mode {} t {}", s.mode, s.t);
                }
            }
        }
    }

    #[test]
    fn full_manual_is_deterministic_and_opens_at_slot() {
        let (env, op) = setup(1, Threshold::L);
        let mut s = env.reset(&mut rng(2, "reset"));
        s.gripper = Gripper { x: 20.0, y: 0.0, z: 0.0, theta: 0.0 };
        s.objects[0].attached = true;
        s.objects[0].pos = [20.0, 0.0, 0.0];
        let a = op.full_manual_action(&s).unwrap();
        assert_eq!(a, op.full_manual_action(&s).unwrap());
        assert_eq!((a.dx, a.dy, a.dz), (0.0, 0.0, 0.0));
        assert_eq!(a.dtheta, 0.5);
    }
}
