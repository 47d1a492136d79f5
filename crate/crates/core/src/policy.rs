//! Learned policies: feature extraction, the mode-gated composite action
//! policy, the masked mode-switching classifier, dataset construction,
//! closed-loop rollouts and bundle checkpoints.

use crate::env::{EnvState, PickPlaceEnv};
use crate::nn::{self, Dataset, Mlp, NnError, TrainReport, TrainSpec};
use crate::operator::{auto_action, LabelSource};
use crate::rng::RngStream;
use crate::types::{ActionDelta, ManualModes, Mode, Regime, Step, Trajectory, ACTION_DIM, MODE_COUNT};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const HIDDEN: [usize; 2] = [64, 64];
pub const BUNDLE_FORMAT: &str = "dipa-bundle";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("no manual-mode steps to fit an action policy{}", .0.map(|m| format!(" for mode {m}")).unwrap_or_default())]
    EmptyActionData(Option<Mode>),
    #[error("episode {episode} step {t} has no mode label; partial-automation layouts need one")]
    MissingMode { episode: u32, t: usize },
    #[error("feature vector has length {got}, expected {expected}")]
    FeatureDim { got: usize, expected: usize },
    #[error("no trajectories given")]
    NoData,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Which state features a network sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSpec {
    /// Gripper X, Y, Z, θ + object positions + moved count.
    FullState,
    /// Same without θ; the automatic modes own the grasping.
    PaActionState,
}

impl FeatureSpec {
    pub fn dim(self, n_objects: usize) -> usize {
        let full = 4 + 3 * n_objects + 1;
        match self {
            FeatureSpec::FullState => full,
            FeatureSpec::PaActionState => full - 1,
        }
    }

    /// Extracts this view from full-state features.
    pub fn extract(self, full: &[f64]) -> Vec<f64> {
        match self {
            FeatureSpec::FullState => full.to_vec(),
            FeatureSpec::PaActionState => {
                let mut v = Vec::with_capacity(full.len() - 1);
                v.extend_from_slice(&full[..3]);
                v.extend_from_slice(&full[4..]);
                v
            }
        }
    }
}

/// Per-dimension standardisation fitted on a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Dimensions with (near) zero spread keep unit scale.
    pub fn fit(data: &Dataset) -> Self {
        let n = data.len().max(1) as f64;
        let d = data.n_in;
        let mut mean = vec![0.0; d];
        for row in data.inputs.chunks_exact(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in data.inputs.chunks_exact(d) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt()).map(|s| if s < 1e-6 { 1.0 } else { s }).collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &mut [f64]) {
        for ((v, m), s) in x.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }

    fn apply_rows(&self, xs: &mut [f64]) {
        for row in xs.chunks_exact_mut(self.mean.len()) {
            self.apply(row);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet {
    pub features: FeatureSpec,
    pub normalizer: Normalizer,
    pub mlp: Mlp,
    #[serde(default)]
    pub report: Option<TrainReport>,
}

impl PolicyNet {
    /// Network output on full-state features.
    pub fn eval(&self, full: &[f64]) -> Vec<f64> {
        let mut x = self.features.extract(full);
        self.normalizer.apply(&mut x);
        self.mlp.forward(&x).expect("feature width checked at construction")
    }

    /// Fits a fresh `[in, 64, 64, out]` network on `data` (raw features).
    pub fn train(features: FeatureSpec, data: &Dataset, spec: &TrainSpec, role: &str) -> Result<Self, PolicyError> {
        let normalizer = Normalizer::fit(data);
        let mut scaled = data.clone();
        normalizer.apply_rows(&mut scaled.inputs);
        let mut sizes = vec![data.n_in];
        sizes.extend_from_slice(&HIDDEN);
        sizes.push(data.n_out);
        let mut seeds = RngStream::derive(spec.seed, &["train", role]).expect("path");
        let mut init_rng = RngStream::derive(seeds.next_u64(), &["init"]).expect("path");
        let initial = Mlp::new(&sizes, &mut init_rng)?;
        let role_spec = TrainSpec { seed: seeds.next_u64(), ..spec.clone() };
        let (mlp, report) = nn::fit(&initial, &scaled, &role_spec)?;
        Ok(Self { features, normalizer, mlp, report: Some(report) })
    }
}

/// How the action policy is split across networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Switcher + one action net shared by every manual mode.
    Combined,
    /// Switcher + one action net per manual mode.
    Separated,
    /// One action net for the whole task, no switcher.
    Single,
}

impl Layout {
    pub fn uses_modes(self) -> bool {
        self != Layout::Single
    }

    pub fn action_features(self) -> FeatureSpec {
        match self {
            Layout::Single => FeatureSpec::FullState,
            _ => FeatureSpec::PaActionState,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionNet {
    /// Manual mode served; `None` for a shared or single net.
    pub mode: Option<Mode>,
    pub net: PolicyNet,
}

/// Anything that can stand in for the operator offline: a mode predictor
/// and a mode-conditioned action predictor over full-state features.
pub trait Imitator {
    /// Masked mode prediction given the mode in force; `None` when the
    /// policy has no mode switcher.
    fn predict_mode(&self, full: &[f64], current: Mode) -> Option<Mode>;
    /// Action for `mode`; `None` asks a mode-free policy.
    fn predict_action(&self, full: &[f64], mode: Option<Mode>) -> ActionDelta;
}

/// Argmax restricted to `{current, current.next()}`; ties stay put.
pub fn masked_argmax(scores: &[f64], current: Mode) -> Mode {
    let next = current.next();
    if scores[next.index()] > scores[current.index()] {
        next
    } else {
        current
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyBundle {
    pub layout: Layout,
    pub n_objects: usize,
    pub manual_modes: ManualModes,
    pub switch_net: Option<PolicyNet>,
    pub action_nets: Vec<ActionNet>,
}

impl PolicyBundle {
    fn action_net(&self, mode: Option<Mode>) -> &PolicyNet {
        match (self.layout, mode) {
            (Layout::Separated, Some(m)) => {
                &self.action_nets.iter().find(|a| a.mode == Some(m)).unwrap_or(&self.action_nets[0]).net
            }
            _ => &self.action_nets[0].net,
        }
    }

    pub fn predict_mode_state(&self, state: &EnvState, current: Mode) -> Option<Mode> {
        self.predict_mode(&state.features(), current)
    }

    pub fn predict_action_state(&self, state: &EnvState, mode: Option<Mode>) -> ActionDelta {
        self.predict_action(&state.features(), mode)
    }

    /// Raw switcher scores, one per mode.
    pub fn mode_scores(&self, full: &[f64]) -> Option<Vec<f64>> {
        self.switch_net.as_ref().map(|n| n.eval(full))
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: String| Err(PolicyError::Checkpoint(m));
        if self.action_nets.is_empty() {
            return bad("no action network".into());
        }
        let full_dim = FeatureSpec::FullState.dim(self.n_objects);
        let expected_nets = match self.layout {
            Layout::Separated => self.manual_modes.modes().len(),
            _ => 1,
        };
        if self.action_nets.len() != expected_nets {
            return bad(format!("{:?} layout needs {expected_nets} action nets, found {}", self.layout, self.action_nets.len()));
        }
        if self.layout.uses_modes() != self.switch_net.is_some() {
            return bad(format!("{:?} layout and switch net presence disagree", self.layout));
        }
        if let Some(s) = &self.switch_net {
            if s.mlp.input_dim() != s.features.dim(self.n_objects) || s.mlp.output_dim() != MODE_COUNT {
                return bad("switch net shape".into());
            }
        }
        for a in &self.action_nets {
            let n = &a.net;
            if n.features != self.layout.action_features()
                || n.mlp.input_dim() != n.features.dim(self.n_objects)
                || n.mlp.output_dim() != ACTION_DIM
                || n.normalizer.mean.len() != n.mlp.input_dim()
            {
                return bad(format!("action net for mode {:?} has wrong shape", a.mode));
            }
        }
        debug_assert!(full_dim > 0);
        Ok(())
    }

    /// Writes `manifest.json` plus one JSON file per network into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), PolicyError> {
        std::fs::create_dir_all(dir)?;
        let mut nets = Vec::new();
        if let Some(s) = &self.switch_net {
            std::fs::write(dir.join("switch.json"), serde_json::to_vec(s)?)?;
            nets.push(NetEntry { role: "switch".into(), mode: None, file: "switch.json".into() });
        }
        for a in &self.action_nets {
            let file = match a.mode {
                Some(m) => format!("action-mode{m}.json"),
                None => "action.json".into(),
            };
            std::fs::write(dir.join(&file), serde_json::to_vec(&a.net)?)?;
            nets.push(NetEntry { role: "action".into(), mode: a.mode, file });
        }
        let manifest = BundleManifest {
            format: BUNDLE_FORMAT.into(),
            version: BUNDLE_VERSION,
            layout: self.layout,
            n_objects: self.n_objects,
            manual_modes: self.manual_modes,
            action_features: self.layout.action_features(),
            nets,
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, PolicyError> {
        let manifest_path = dir.join("manifest.json");
        let manifest: BundleManifest = serde_json::from_slice(
            &std::fs::read(&manifest_path)
                .map_err(|e| PolicyError::Checkpoint(format!("{}: {e}", manifest_path.display())))?,
        )?;
        if manifest.format != BUNDLE_FORMAT || manifest.version != BUNDLE_VERSION {
            return Err(PolicyError::Checkpoint(format!("unsupported bundle {} v{}", manifest.format, manifest.version)));
        }
        let mut switch_net = None;
        let mut action_nets = Vec::new();
        for e in &manifest.nets {
            let net: PolicyNet = serde_json::from_slice(&std::fs::read(dir.join(&e.file))?)?;
            match e.role.as_str() {
                "switch" => switch_net = Some(net),
                "action" => action_nets.push(ActionNet { mode: e.mode, net }),
                other => return Err(PolicyError::Checkpoint(format!("unknown net role `{other}`"))),
            }
        }
        let bundle = PolicyBundle {
            layout: manifest.layout,
            n_objects: manifest.n_objects,
            manual_modes: manifest.manual_modes,
            switch_net,
            action_nets,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

impl Imitator for PolicyBundle {
    fn predict_mode(&self, full: &[f64], current: Mode) -> Option<Mode> {
        self.mode_scores(full).map(|s| masked_argmax(&s, current))
    }

    fn predict_action(&self, full: &[f64], mode: Option<Mode>) -> ActionDelta {
        if let Some(m) = mode {
            if self.layout.uses_modes() && !self.manual_modes.contains(m) {
                return auto_action(m).expect("non-manual modes are automatic");
            }
        }
        ActionDelta::from_slice(&self.action_net(mode).eval(full)).clamped()
    }
}

#[derive(Serialize, Deserialize)]
struct NetEntry {
    role: String,
    mode: Option<Mode>,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct BundleManifest {
    format: String,
    version: u32,
    layout: Layout,
    n_objects: usize,
    manual_modes: ManualModes,
    action_features: FeatureSpec,
    nets: Vec<NetEntry>,
}

/// Training sets for one bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub switch: Option<Dataset>,
    pub action: Vec<(Option<Mode>, Dataset)>,
}

fn one_hot(mode: Mode) -> [f64; MODE_COUNT] {
    let mut v = [0.0; MODE_COUNT];
    v[mode.index()] = 1.0;
    v
}

/// Builds the switcher dataset (every step, one-hot demonstrated mode) and
/// the action dataset(s) (demonstrated-manual steps, operator label).
/// The single-net layout takes every step into one action dataset.
pub fn build_datasets(
    trajectories: &[Trajectory],
    layout: Layout,
    label: LabelSource,
    manual: ManualModes,
) -> Result<Datasets, PolicyError> {
    let first = trajectories.iter().flat_map(|t| t.steps.first()).next().ok_or(PolicyError::NoData)?;
    let full_dim = first.state_full.len();
    let n_objects = (full_dim - 5) / 3;
    let action_spec = layout.action_features();
    let action_dim = action_spec.dim(n_objects);

    let mut switch = layout.uses_modes().then(|| Dataset::new(full_dim, MODE_COUNT));
    let mut action: Vec<(Option<Mode>, Dataset)> = match layout {
        Layout::Separated => manual.modes().into_iter().map(|m| (Some(m), Dataset::new(action_dim, ACTION_DIM))).collect(),
        _ => vec![(None, Dataset::new(action_dim, ACTION_DIM))],
    };

    for traj in trajectories {
        for step in &traj.steps {
            if step.state_full.len() != full_dim {
                return Err(PolicyError::FeatureDim { got: step.state_full.len(), expected: full_dim });
            }
            let target = label.pick(step).to_array();
            if !layout.uses_modes() {
                action[0].1.push(&step.state_full, &target);
                continue;
            }
            let mode = step.mode.ok_or(PolicyError::MissingMode { episode: step.episode_id, t: step.t })?;
            if let Some(s) = switch.as_mut() {
                s.push(&step.state_full, &one_hot(mode));
            }
            if manual.contains(mode) {
                let slot = match layout {
                    Layout::Separated => action.iter_mut().find(|(m, _)| *m == Some(mode)).expect("slot per manual mode"),
                    _ => &mut action[0],
                };
                slot.1.push(&action_spec.extract(&step.state_full), &target);
            }
        }
    }
    for (mode, d) in &action {
        if d.is_empty() {
            return Err(PolicyError::EmptyActionData(*mode));
        }
    }
    Ok(Datasets { switch, action })
}

/// Fits every network of a bundle.
pub fn fit_bundle(
    datasets: &Datasets,
    layout: Layout,
    manual: ManualModes,
    spec: &TrainSpec,
) -> Result<PolicyBundle, PolicyError> {
    let switch_net = datasets
        .switch
        .as_ref()
        .map(|d| PolicyNet::train(FeatureSpec::FullState, d, spec, "switch"))
        .transpose()?;
    let action_nets = datasets
        .action
        .iter()
        .map(|(mode, d)| {
            let role = mode.map(|m| format!("action-{m}")).unwrap_or_else(|| "action".into());
            Ok(ActionNet { mode: *mode, net: PolicyNet::train(layout.action_features(), d, spec, &role)? })
        })
        .collect::<Result<Vec<_>, PolicyError>>()?;
    let full_dim = datasets
        .switch
        .as_ref()
        .map(|d| d.n_in)
        .unwrap_or_else(|| action_nets[0].net.mlp.input_dim() + usize::from(layout.action_features() == FeatureSpec::PaActionState));
    let bundle = PolicyBundle { layout, n_objects: (full_dim - 5) / 3, manual_modes: manual, switch_net, action_nets };
    bundle.validate()?;
    Ok(bundle)
}

/// Closed-loop episode under `policy`, without disturbance. The recorded
/// mode is the predicted one.
pub fn rollout<P: Imitator + ?Sized>(
    policy: &P,
    env: &PickPlaceEnv,
    reset_rng: &mut RngStream,
    episode_id: u32,
    iteration_k: u32,
) -> Trajectory {
    let mut state = env.reset(reset_rng);
    let mut steps = Vec::new();
    let mut uses_modes = false;
    while !env.is_done(&state) {
        let full = state.features();
        let mode = policy.predict_mode(&full, state.mode);
        if let Some(m) = mode {
            state.mode = m;
            uses_modes = true;
        }
        let action = policy.predict_action(&full, mode);
        steps.push(Step {
            t: state.t,
            state_full: full,
            action_intended: action,
            action_executed: action,
            mode,
            episode_id,
            iteration_k,
        });
        state = env.step(&state, action);
    }
    Trajectory {
        episode_id,
        iteration_k,
        seed: reset_rng.root_seed(),
        regime: if uses_modes || steps.is_empty() { Regime::PartialAutomation } else { Regime::FullManual },
        sigma: [0.0; ACTION_DIM],
        steps,
        terminal: state.summary(),
        success: env.is_success(&state),
    }
}
