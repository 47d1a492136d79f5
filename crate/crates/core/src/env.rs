//! Kinematic multi-object pick-and-place environment.
//!
//! Objects start in the white area (X = −20) and must be carried to matching
//! slots in the blue area (X = +20). The gripper moves by clamped deltas;
//! closing it over a free object attaches the object, opening it drops the
//! object to the floor, and a drop within `place_radius` of the object's slot
//! counts as placed.

use crate::rng::RngStream;
use crate::types::{ActionDelta, EnvSummary, Mode};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const X_RANGE: (f64, f64) = (-30.0, 30.0);
pub const Y_RANGE: (f64, f64) = (-20.0, 20.0);
pub const Z_RANGE: (f64, f64) = (0.0, 20.0);
pub const THETA_RANGE: (f64, f64) = (0.0, 1.0);

/// Gripper pose after reset: centre of the workspace, 10 cm up, open.
pub const HOME: [f64; 4] = [0.0, 0.0, 10.0, 1.0];
pub const WHITE_X: f64 = -20.0;
pub const BLUE_X: f64 = 20.0;
pub const SLOT_SPACING: f64 = 8.0;
pub const SLOT_CAPACITY: usize = 3;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EnvError {
    #[error("n_objects = {0} is outside 1..={SLOT_CAPACITY}")]
    ObjectCount(usize),
    #[error("invalid environment config: {0}")]
    Invalid(String),
    #[error("feature vector has length {got}, expected {expected}")]
    FeatureLength { got: usize, expected: usize },
}

/// X position at which the carry mode hands over to manual placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Threshold {
    L,
    M,
    S,
}

impl Threshold {
    pub fn x(self) -> f64 {
        match self {
            Threshold::L => 15.0,
            Threshold::M => 0.0,
            Threshold::S => -15.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Threshold::L => "L",
            Threshold::M => "M",
            Threshold::S => "S",
        }
    }
}

impl std::str::FromStr for Threshold {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "L" | "l" => Ok(Threshold::L),
            "M" | "m" => Ok(Threshold::M),
            "S" | "s" => Ok(Threshold::S),
            other => Err(format!("unknown threshold `{other}` (expected L, M or S)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub n_objects: usize,
    /// Half-width of the uniform noise on initial object X and Y.
    pub sigma_init_cm: f64,
    pub auto2_threshold: Threshold,
    pub t_max: usize,
    pub grasp_radius: f64,
    /// Largest vertical gripper–object gap at which a grasp succeeds.
    pub grasp_height: f64,
    pub place_radius: f64,
    pub theta_close: f64,
    pub theta_open: f64,
}

impl EnvConfig {
    pub fn with_objects(n_objects: usize) -> Self {
        Self {
            n_objects,
            sigma_init_cm: 2.0,
            auto2_threshold: Threshold::L,
            t_max: 150 * n_objects,
            grasp_radius: 2.0,
            grasp_height: 2.0,
            place_radius: 5.0,
            theta_close: 0.1,
            theta_open: 0.9,
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.n_objects == 0 || self.n_objects > SLOT_CAPACITY {
            return Err(EnvError::ObjectCount(self.n_objects));
        }
        if !(self.sigma_init_cm >= 0.0 && self.sigma_init_cm.is_finite()) {
            return Err(EnvError::Invalid("sigma_init_cm must be >= 0".into()));
        }
        for (name, v) in [
            ("grasp_radius", self.grasp_radius),
            ("grasp_height", self.grasp_height),
            ("place_radius", self.place_radius),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(EnvError::Invalid(format!("{name} must be > 0")));
            }
        }
        if !(self.theta_close < self.theta_open) {
            return Err(EnvError::Invalid("theta_close must be below theta_open".into()));
        }
        Ok(())
    }

    /// Nominal Y of slot `i` (same Y in the white and blue areas).
    pub fn slot_y(&self, i: usize) -> f64 {
        (i as f64 - (self.n_objects as f64 - 1.0) / 2.0) * SLOT_SPACING
    }

    /// Full-state feature dimension: gripper (4) + objects (3 each) + moved count.
    pub fn full_dim(&self) -> usize {
        4 + 3 * self.n_objects + 1
    }
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self::with_objects(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gripper {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub theta: f64,
}

impl Gripper {
    fn clamp_to_workspace(&mut self) {
        self.x = self.x.clamp(X_RANGE.0, X_RANGE.1);
        self.y = self.y.clamp(Y_RANGE.0, Y_RANGE.1);
        self.z = self.z.clamp(Z_RANGE.0, Z_RANGE.1);
        self.theta = self.theta.clamp(THETA_RANGE.0, THETA_RANGE.1);
    }

    pub fn position(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub pos: [f64; 3],
    pub slot_y: f64,
    pub attached: bool,
    pub placed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub gripper: Gripper,
    pub objects: Vec<Object>,
    pub moved_count: usize,
    /// Mode in force for the step about to be taken; set by the caller.
    pub mode: Mode,
    pub t: usize,
    /// Index of the object most recently attached.
    pub last_carried: Option<usize>,
}

pub(crate) fn horizontal_dist(a: [f64; 3], x: f64, y: f64) -> f64 {
    ((a[0] - x).powi(2) + (a[1] - y).powi(2)).sqrt()
}

impl EnvState {
    pub fn attached(&self) -> Option<usize> {
        self.objects.iter().position(|o| o.attached)
    }

    pub fn summary(&self) -> EnvSummary {
        EnvSummary {
            gripper: [self.gripper.x, self.gripper.y, self.gripper.z, self.gripper.theta],
            objects: self.objects.iter().map(|o| o.pos).collect(),
            moved_count: self.moved_count,
            t: self.t,
        }
    }

    /// Full-state features: gripper (X, Y, Z, θ), every object's (X, Y, Z),
    /// then the number of moved objects.
    pub fn features(&self) -> Vec<f64> {
        let mut f = Vec::with_capacity(4 + 3 * self.objects.len() + 1);
        f.extend_from_slice(&[self.gripper.x, self.gripper.y, self.gripper.z, self.gripper.theta]);
        for o in &self.objects {
            f.extend_from_slice(&o.pos);
        }
        f.push(self.moved_count as f64);
        f
    }

    /// Rebuilds a state from logged full-state features.
    ///
    /// An object is attached when it coincides with a closed gripper and is
    /// placed when it rests within `place_radius` of its blue slot; both
    /// follow from the step rules, so the reconstruction is exact for states
    /// the simulator produces. `last_carried` is not recoverable and is
    /// left empty.
    pub fn from_features(features: &[f64], config: &EnvConfig, mode: Mode, t: usize) -> Result<Self, EnvError> {
        let expected = config.full_dim();
        if features.len() != expected {
            return Err(EnvError::FeatureLength { got: features.len(), expected });
        }
        let gripper = Gripper { x: features[0], y: features[1], z: features[2], theta: features[3] };
        let objects: Vec<Object> = (0..config.n_objects)
            .map(|i| {
                let pos = [features[4 + 3 * i], features[5 + 3 * i], features[6 + 3 * i]];
                let slot_y = config.slot_y(i);
                let attached = gripper.theta <= config.theta_close && pos == gripper.position();
                let placed = !attached
                    && pos[2] == 0.0
                    && horizontal_dist(pos, BLUE_X, slot_y) <= config.place_radius;
                Object { pos, slot_y, attached, placed }
            })
            .collect();
        let moved_count = features[expected - 1] as usize;
        Ok(Self { gripper, objects, moved_count, mode, t, last_carried: None })
    }
}

/// Deterministic pick-and-place dynamics for one configuration.
#[derive(Debug, Clone)]
pub struct PickPlaceEnv {
    config: EnvConfig,
}

impl PickPlaceEnv {
    pub fn new(config: EnvConfig) -> Result<Self, EnvError> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn reset(&self, rng: &mut RngStream) -> EnvState {
        let c = &self.config;
        let objects = (0..c.n_objects)
            .map(|i| {
                let slot_y = c.slot_y(i);
                let (nx, ny) = if c.sigma_init_cm > 0.0 {
                    let w = c.sigma_init_cm;
                    (rng.random_range(-w..=w), rng.random_range(-w..=w))
                } else {
                    (0.0, 0.0)
                };
                Object { pos: [WHITE_X + nx, slot_y + ny, 0.0], slot_y, attached: false, placed: false }
            })
            .collect();
        EnvState {
            gripper: Gripper { x: HOME[0], y: HOME[1], z: HOME[2], theta: HOME[3] },
            objects,
            moved_count: 0,
            mode: Mode::RETURN,
            t: 0,
            last_carried: None,
        }
    }

    pub fn step(&self, state: &EnvState, action: ActionDelta) -> EnvState {
        let c = &self.config;
        let a = action.clamped();
        let mut next = state.clone();
        let g = &mut next.gripper;
        g.x += a.dx;
        g.y += a.dy;
        g.z += a.dz;
        g.theta += a.dtheta;
        g.clamp_to_workspace();
        let g = next.gripper;

        if let Some(i) = next.attached() {
            let obj = &mut next.objects[i];
            if g.theta >= c.theta_open {
                obj.attached = false;
                obj.pos = [g.x, g.y, 0.0];
                if horizontal_dist(obj.pos, BLUE_X, obj.slot_y) <= c.place_radius {
                    obj.placed = true;
                    next.moved_count += 1;
                }
            } else {
                obj.pos = g.position();
            }
        } else if g.theta <= c.theta_close {
            let candidate = next
                .objects
                .iter()
                .enumerate()
                .filter(|(_, o)| !o.placed)
                .map(|(i, o)| (i, horizontal_dist(o.pos, g.x, g.y), (o.pos[2] - g.z).abs()))
                .filter(|&(_, d, dz)| d <= c.grasp_radius && dz <= c.grasp_height)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((i, _, _)) = candidate {
                let obj = &mut next.objects[i];
                obj.attached = true;
                obj.pos = g.position();
                next.last_carried = Some(i);
            }
        }
        next.t += 1;
        next
    }

    pub fn is_success(&self, state: &EnvState) -> bool {
        state.moved_count == self.config.n_objects
    }

    pub fn is_done(&self, state: &EnvState) -> bool {
        self.is_success(state) || state.t >= self.config.t_max
    }
}
