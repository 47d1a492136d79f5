//! Helpers shared by the integration tests and the acceptance target.
#![allow(dead_code)]

use dipa::env::EnvConfig;
use dipa::learner::{MethodVariant, SigmaContext};
use dipa::operator::auto_action;
use dipa::policy::Imitator;
use dipa::types::{ActionDelta, EnvSummary, Mode, Regime, Step, Trajectory, ACTION_DIM};
use dipa::RngStream;
use rand::Rng;

/// Deterministic stand-in for a learned bundle. Mode predictions move to
/// the next mode when a hash of the features falls below `flip_rate`;
/// manual actions are a fixed nonlinear function of the features.
#[derive(Debug, Clone)]
pub struct StubPolicy {
    pub flip_rate: f64,
    pub gain: [f64; ACTION_DIM],
    pub has_switcher: bool,
}

fn unit_hash(x: &[f64], salt: u64) -> f64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ salt;
    for v in x {
        h ^= v.to_bits();
        h = h.wrapping_mul(0x0100_0000_01b3);
        h ^= h >> 29;
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

impl Imitator for StubPolicy {
    fn predict_mode(&self, full: &[f64], current: Mode) -> Option<Mode> {
        if !self.has_switcher {
            return None;
        }
        Some(if unit_hash(full, 1) < self.flip_rate { current.next() } else { current })
    }

    fn predict_action(&self, full: &[f64], mode: Option<Mode>) -> ActionDelta {
        if let Some(m) = mode.filter(|m| !m.is_manual()) {
            return auto_action(m).unwrap();
        }
        let salt = mode.map(|m| m.index() as f64).unwrap_or(-1.0);
        let s: f64 = full.iter().enumerate().map(|(i, v)| v * ((i as f64 + 1.0) * 0.37 + salt).sin()).sum();
        ActionDelta::from_array(std::array::from_fn(|d| (self.gain[d] * (s + d as f64)).tanh() * 3.0)).clamped()
    }
}

/// Random trajectories shaped like the variant's demonstrations: modes
/// advance along the cycle for partially automated methods and are absent
/// otherwise; auto steps carry the automatic action.
pub fn random_trajectories(rng: &mut RngStream, variant: MethodVariant, episodes: usize, max_len: usize) -> Vec<Trajectory> {
    let n_objects = rng.random_range(1..=3);
    let dim = EnvConfig::with_objects(n_objects).full_dim();
    let pa = variant.regime() == Regime::PartialAutomation;
    (0..episodes)
        .map(|e| {
            let len = rng.random_range(1..=max_len);
            let mut mode = Mode::RETURN;
            let steps = (0..len)
                .map(|t| {
                    if t > 0 && rng.random_bool(0.25) {
                        mode = mode.next();
                    }
                    let state_full: Vec<f64> = (0..dim).map(|_| rng.random_range(-20.0..20.0)).collect();
                    let manual = !pa || mode.is_manual();
                    let intended = if manual {
                        ActionDelta::from_array(std::array::from_fn(|_| rng.random_range(-5.0..5.0))).clamped()
                    } else {
                        auto_action(mode).unwrap()
                    };
                    let executed = if manual {
                        ActionDelta::from_array(std::array::from_fn(|d| intended.to_array()[d] + rng.random_range(-0.5..0.5))).clamped()
                    } else {
                        intended
                    };
                    Step {
                        t,
                        state_full,
                        action_intended: intended,
                        action_executed: executed,
                        mode: pa.then_some(mode),
                        episode_id: e as u32,
                        iteration_k: 1,
                    }
                })
                .collect();
            Trajectory {
                episode_id: e as u32,
                iteration_k: 1,
                seed: rng.random(),
                regime: variant.regime(),
                sigma: [0.0; ACTION_DIM],
                steps,
                terminal: EnvSummary { gripper: [0.0; 4], objects: vec![[0.0; 3]; n_objects], moved_count: 0, t: len },
                success: false,
            }
        })
        .collect()
}

pub fn stub_for(variant: MethodVariant, rng: &mut RngStream) -> StubPolicy {
    StubPolicy {
        flip_rate: rng.random_range(0.0..0.6),
        gain: std::array::from_fn(|_| rng.random_range(0.01..0.2)),
        has_switcher: variant.uses_pa(),
    }
}

/// Independent reference for the disturbance update: gathers the residual
/// matrix column by column, then averages each column.
pub fn oracle_sigma(
    ctx: &SigmaContext<'_>,
    trajectories: &[Trajectory],
    policy: &StubPolicy,
    previous: [f64; ACTION_DIM],
) -> [f64; ACTION_DIM] {
    if !ctx.variant.uses_disturbance() {
        return [0.0; ACTION_DIM];
    }
    let mut columns: [Vec<f64>; ACTION_DIM] = Default::default();
    for traj in trajectories {
        for (i, step) in traj.steps.iter().enumerate() {
            let demonstrated_manual = step.mode.is_some_and(|m| m == Mode::REACH || m == Mode::PLACE);
            let predicted = match ctx.variant {
                MethodVariant::Dart => None,
                MethodVariant::Dipa => {
                    if !demonstrated_manual {
                        continue;
                    }
                    let prev = if i == 0 { Mode::RETURN } else { traj.steps[i - 1].mode.unwrap() };
                    Some(policy.predict_mode(&step.state_full, prev).unwrap())
                }
                _ => {
                    if !demonstrated_manual {
                        continue;
                    }
                    step.mode
                }
            };
            let pred = policy.predict_action(&step.state_full, predicted).to_array();
            let label = ctx.label.pick(step).to_array();
            for d in 0..ACTION_DIM {
                columns[d].push(pred[d] - label[d]);
            }
        }
    }
    if columns[0].is_empty() {
        return previous;
    }
    std::array::from_fn(|d| columns[d].iter().map(|r| r * r).sum::<f64>() / columns[d].len() as f64)
}

/// Switcher that enters or keeps the manual mode on ordinary steps and
/// advances past it on flagged steps (so a reach step is predicted as carry). Manual
/// actions reproduce the label plus a per-step offset stored in the
/// features; automatic modes return the automatic constants.
#[derive(Debug, Clone, Copy)]
pub struct GapFixturePolicy;

pub const FLAG: usize = 0;
pub const OFFSET: usize = 1;
pub const LABEL: [f64; ACTION_DIM] = [-1.0, 0.5, 0.0, -1.0];

impl Imitator for GapFixturePolicy {
    fn predict_mode(&self, full: &[f64], current: Mode) -> Option<Mode> {
        Some(if full[FLAG] == 1.0 || !current.is_manual() { current.next() } else { current })
    }

    fn predict_action(&self, full: &[f64], mode: Option<Mode>) -> ActionDelta {
        match mode {
            Some(m) if !m.is_manual() => auto_action(m).unwrap(),
            _ => ActionDelta::from_array(std::array::from_fn(|d| LABEL[d] + full[OFFSET + d])),
        }
    }
}

/// One trajectory: a return step, then `manual` reach steps of which the
/// last `flagged` are mispredicted. The first reach step follows a return
/// step and is never flagged. `offsets[i]` perturbs the manual
/// prediction of reach step `i`.
pub fn gap_fixture(manual: usize, flagged: usize, offsets: &[[f64; ACTION_DIM]]) -> Vec<Trajectory> {
    assert!(flagged == 0 || flagged < manual, "the first reach step cannot be flagged");
    let dim = EnvConfig::with_objects(1).full_dim();
    let label = ActionDelta::from_array(LABEL);
    let mut steps = vec![Step {
        t: 0,
        state_full: vec![0.0; dim],
        action_intended: auto_action(Mode::RETURN).unwrap(),
        action_executed: auto_action(Mode::RETURN).unwrap(),
        mode: Some(Mode::RETURN),
        episode_id: 0,
        iteration_k: 1,
    }];
    for i in 0..manual {
        let mut full = vec![0.0; dim];
        full[FLAG] = if i >= manual - flagged { 1.0 } else { 0.0 };
        if let Some(o) = offsets.get(i) {
            full[OFFSET..OFFSET + ACTION_DIM].copy_from_slice(o);
        }
        steps.push(Step {
            t: i + 1,
            state_full: full,
            action_intended: label,
            action_executed: label,
            mode: Some(Mode::REACH),
            episode_id: 0,
            iteration_k: 1,
        });
    }
    vec![Trajectory {
        episode_id: 0,
        iteration_k: 1,
        seed: 0,
        regime: Regime::PartialAutomation,
        sigma: [0.0; ACTION_DIM],
        terminal: EnvSummary { gripper: [0.0; 4], objects: vec![[0.0; 3]], moved_count: 0, t: steps.len() },
        steps,
        success: false,
    }]
}
