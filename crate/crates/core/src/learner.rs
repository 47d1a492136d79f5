//! Iterative learner: demonstration collection with disturbance injection,
//! policy fitting on aggregated data, and the disturbance-level update, for
//! every comparison method.
//!
//! One iteration k:
//! 1. collect E episodes with the operator under Σ_k (Σ_1 = 0),
//! 2. fit the bundle on every trajectory from iterations 1..=k,
//! 3. set Σ_{k+1} to the per-dimension mean squared residual between the
//!    fitted policy and the operator's labels on the iteration-k data,
//! 4. evaluate the bundle in closed loop.

use crate::env::{EnvConfig, EnvError, EnvState, PickPlaceEnv};
use crate::nn::TrainSpec;
use crate::operator::{auto_action, inject_disturbance, LabelSource, Operator, OperatorConfig, OperatorError};
use crate::policy::{self, build_datasets, fit_bundle, Imitator, Layout, PolicyBundle, PolicyError};
use crate::rng::RngStream;
use crate::trajfile;
use crate::types::{DisturbanceLevel, ManualModes, Mode, Regime, Step, Trajectory, ACTION_DIM};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};

/// Episodes whose operator faults are resampled at most this many times.
pub const MAX_EPISODE_ATTEMPTS: u32 = 20;

#[derive(Debug, thiserror::Error)]
pub enum LearnerError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("episode {episode} of iteration {k}: operator faulted on {attempts} attempts")]
    CollectionFailed { k: u32, episode: u32, attempts: u32 },
    #[error("{0} needs a mode-switching policy")]
    NoSwitcher(MethodVariant),
    #[error("the predicted-selection reading needs a queryable operator")]
    NeedsOperator,
    #[error("negative log-likelihood needs strictly positive variance, got {0:?}")]
    ZeroVariance([f64; ACTION_DIM]),
    #[error("no steps selected for the likelihood")]
    EmptySelection,
    #[error("invalid experiment: {0}")]
    Config(String),
    #[error("writing artifacts: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Which mode decides the steps entering the disturbance estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeltaSource {
    /// The learned switcher's prediction.
    Predicted,
    /// The operator's demonstrated mode.
    Demonstrated,
    NotApplicable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodVariant {
    Dipa,
    DipaMinus,
    SDipaMinus,
    Bcpa,
    Dart,
    Bc,
}

impl MethodVariant {
    pub const ALL: [MethodVariant; 6] = [
        MethodVariant::Dipa,
        MethodVariant::DipaMinus,
        MethodVariant::SDipaMinus,
        MethodVariant::Bcpa,
        MethodVariant::Dart,
        MethodVariant::Bc,
    ];

    pub fn uses_pa(self) -> bool {
        matches!(self, Self::Dipa | Self::DipaMinus | Self::SDipaMinus | Self::Bcpa)
    }

    pub fn uses_disturbance(self) -> bool {
        matches!(self, Self::Dipa | Self::DipaMinus | Self::SDipaMinus | Self::Dart)
    }

    pub fn delta_mode_source(self) -> DeltaSource {
        match self {
            Self::Dipa => DeltaSource::Predicted,
            Self::DipaMinus | Self::SDipaMinus => DeltaSource::Demonstrated,
            _ => DeltaSource::NotApplicable,
        }
    }

    pub fn separated_action_nets(self) -> bool {
        self == Self::SDipaMinus
    }

    pub fn layout(self) -> Layout {
        if !self.uses_pa() {
            Layout::Single
        } else if self.separated_action_nets() {
            Layout::Separated
        } else {
            Layout::Combined
        }
    }

    pub fn regime(self) -> Regime {
        if self.uses_pa() {
            Regime::PartialAutomation
        } else {
            Regime::FullManual
        }
    }

    /// Directory-safe name.
    pub fn slug(self) -> &'static str {
        match self {
            Self::Dipa => "dipa",
            Self::DipaMinus => "dipa_minus",
            Self::SDipaMinus => "s_dipa_minus",
            Self::Bcpa => "bcpa",
            Self::Dart => "dart",
            Self::Bc => "bc",
        }
    }
}

impl fmt::Display for MethodVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Dipa => "DIPA",
            Self::DipaMinus => "DIPA(-)",
            Self::SDipaMinus => "S-DIPA(-)",
            Self::Bcpa => "BCPA",
            Self::Dart => "DART",
            Self::Bc => "BC",
        })
    }
}

impl std::str::FromStr for MethodVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let norm = s.to_ascii_lowercase().replace("(-)", "_minus").replace('-', "_");
        Ok(match norm.as_str() {
            "dipa" => Self::Dipa,
            "dipa_minus" => Self::DipaMinus,
            "s_dipa_minus" | "sdipa_minus" => Self::SDipaMinus,
            "bcpa" => Self::Bcpa,
            "dart" => Self::Dart,
            "bc" => Self::Bc,
            _ => return Err(format!("unknown method `{s}`")),
        })
    }
}

/// How DIPA selects and evaluates steps when estimating Σ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaReading {
    /// Demonstrated-manual steps, action taken under the predicted mode: a
    /// step the switcher wrongly calls automatic contributes the full
    /// auto-versus-manual residual.
    #[default]
    LabelAnchored,
    /// Steps whose predicted mode is manual, labelled by querying the
    /// operator at the logged state.
    PredictedSelection,
}

/// Everything residual extraction needs besides data and policy.
#[derive(Debug, Clone, Copy)]
pub struct SigmaContext<'a> {
    pub variant: MethodVariant,
    pub reading: SigmaReading,
    pub label: LabelSource,
    pub operator: Option<&'a Operator>,
}

impl<'a> SigmaContext<'a> {
    pub fn new(variant: MethodVariant) -> Self {
        Self { variant, reading: SigmaReading::default(), label: LabelSource::Intended, operator: None }
    }
}

/// Per-step (predicted − label) residuals over the steps the variant's
/// disturbance objective selects.
pub fn sigma_residuals<P: Imitator + ?Sized>(
    ctx: &SigmaContext<'_>,
    trajectories: &[Trajectory],
    policy: &P,
) -> Result<Vec<[f64; ACTION_DIM]>, LearnerError> {
    let manual = ManualModes::default();
    let mut out = Vec::new();
    match ctx.variant {
        MethodVariant::Bcpa | MethodVariant::Bc => {}
        MethodVariant::Dart => {
            for step in trajectories.iter().flat_map(|t| &t.steps) {
                let pred = policy.predict_action(&step.state_full, None);
                out.push(pred.sub(ctx.label.pick(step)));
            }
        }
        MethodVariant::DipaMinus | MethodVariant::SDipaMinus => {
            for step in trajectories.iter().flat_map(|t| &t.steps) {
                if let Some(m) = step.mode.filter(|m| manual.contains(*m)) {
                    let pred = policy.predict_action(&step.state_full, Some(m));
                    out.push(pred.sub(ctx.label.pick(step)));
                }
            }
        }
        MethodVariant::Dipa => {
            for traj in trajectories {
                let mut prev = Mode::RETURN;
                for step in &traj.steps {
                    let demonstrated = step.mode;
                    let predicted = policy
                        .predict_mode(&step.state_full, prev)
                        .ok_or(LearnerError::NoSwitcher(ctx.variant))?;
                    if let Some(d) = demonstrated {
                        prev = d;
                    }
                    match ctx.reading {
                        SigmaReading::LabelAnchored => {
                            if demonstrated.is_some_and(|d| manual.contains(d)) {
                                let pred = policy.predict_action(&step.state_full, Some(predicted));
                                out.push(pred.sub(ctx.label.pick(step)));
                            }
                        }
                        SigmaReading::PredictedSelection => {
                            if !manual.contains(predicted) {
                                continue;
                            }
                            let op = ctx.operator.ok_or(LearnerError::NeedsOperator)?;
                            let state = EnvState::from_features(&step.state_full, op.env_config(), predicted, step.t)?;
                            match op.manual_action(&state, predicted) {
                                Ok(label) => {
                                    let pred = policy.predict_action(&step.state_full, Some(predicted));
                                    out.push(pred.sub(label));
                                }
                                Err(e) => log::debug!("step {} skipped in Σ estimate: {e}", step.t),
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaUpdate {
    pub level: DisturbanceLevel,
    pub selected_steps: usize,
    /// The selection was empty and the previous level was kept.
    pub kept_previous: bool,
}

/// Maximum-likelihood Σ_{k+1}: per-dimension mean of squared residuals.
/// Methods without disturbance injection always get zero.
pub fn update_sigma<P: Imitator + ?Sized>(
    ctx: &SigmaContext<'_>,
    trajectories: &[Trajectory],
    policy: &P,
    previous: &DisturbanceLevel,
) -> Result<SigmaUpdate, LearnerError> {
    let next_k = previous.iteration_k + 1;
    if !ctx.variant.uses_disturbance() {
        return Ok(SigmaUpdate { level: DisturbanceLevel::zero(next_k), selected_steps: 0, kept_previous: false });
    }
    let res = sigma_residuals(ctx, trajectories, policy)?;
    if res.is_empty() {
        log::warn!("{}: no steps selected for the disturbance update; keeping Σ = {:?}", ctx.variant, previous.sigma);
        return Ok(SigmaUpdate {
            level: DisturbanceLevel { sigma: previous.sigma, iteration_k: next_k },
            selected_steps: 0,
            kept_previous: true,
        });
    }
    let mut sigma = [0.0; ACTION_DIM];
    for r in &res {
        for d in 0..ACTION_DIM {
            sigma[d] += r[d] * r[d];
        }
    }
    let n = res.len() as f64;
    sigma.iter_mut().for_each(|s| *s /= n);
    Ok(SigmaUpdate { level: DisturbanceLevel::new(sigma, next_k).expect("squares are >= 0"), selected_steps: res.len(), kept_previous: false })
}

/// Mean Gaussian negative log-likelihood of residuals under N(0, diag(sigma)).
pub fn gaussian_nll(residuals: &[[f64; ACTION_DIM]], sigma: &[f64; ACTION_DIM]) -> Result<f64, LearnerError> {
    if sigma.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(LearnerError::ZeroVariance(*sigma));
    }
    if residuals.is_empty() {
        return Err(LearnerError::EmptySelection);
    }
    let log_norm: f64 = sigma.iter().map(|s| 0.5 * (2.0 * std::f64::consts::PI * s).ln()).sum();
    let quad: f64 = residuals
        .iter()
        .map(|r| r.iter().zip(sigma).map(|(e, s)| e * e / (2.0 * s)).sum::<f64>())
        .sum();
    Ok(log_norm + quad / residuals.len() as f64)
}

/// Mean negative log-density of the operator's labels under
/// N(predicted action, diag(sigma)) over the variant's selected steps.
pub fn manual_nll<P: Imitator + ?Sized>(
    ctx: &SigmaContext<'_>,
    trajectories: &[Trajectory],
    policy: &P,
    sigma: &DisturbanceLevel,
) -> Result<f64, LearnerError> {
    if sigma.sigma.iter().any(|&s| !(s > 0.0)) {
        return Err(LearnerError::ZeroVariance(sigma.sigma));
    }
    gaussian_nll(&sigma_residuals(ctx, trajectories, policy)?, &sigma.sigma)
}

/// Collects one operator episode. Errors are operator faults.
pub fn collect_episode(
    regime: Regime,
    env: &PickPlaceEnv,
    operator: &Operator,
    sigma: &DisturbanceLevel,
    episode_seed: u64,
    episode_id: u32,
    iteration_k: u32,
) -> Result<Trajectory, OperatorError> {
    let mut reset_rng = RngStream::derive(episode_seed, &["reset"]).expect("path");
    let mut noise_rng = RngStream::derive(episode_seed, &["noise"]).expect("path");
    let mut state = env.reset(&mut reset_rng);
    let mut steps = Vec::new();
    while !env.is_done(&state) {
        let (mode, intended, executed) = match regime {
            Regime::PartialAutomation => {
                state.mode = operator.switch_mode(&state);
                if state.mode.is_manual() {
                    let intended = operator.manual_action(&state, state.mode)?;
                    (Some(state.mode), intended, inject_disturbance(intended, sigma, &mut noise_rng)?)
                } else {
                    let a = auto_action(state.mode)?;
                    (Some(state.mode), a, a)
                }
            }
            Regime::FullManual => {
                let intended = operator.full_manual_action(&state)?;
                (None, intended, inject_disturbance(intended, sigma, &mut noise_rng)?)
            }
        };
        steps.push(Step {
            t: state.t,
            state_full: state.features(),
            action_intended: intended,
            action_executed: executed,
            mode,
            episode_id,
            iteration_k,
        });
        state = env.step(&state, executed);
    }
    Ok(Trajectory {
        episode_id,
        iteration_k,
        seed: episode_seed,
        regime,
        sigma: sigma.sigma,
        steps,
        terminal: state.summary(),
        success: env.is_success(&state),
    })
}

/// Collects `episodes` demonstrations for iteration `k`. Methods without
/// disturbance injection collect with Σ forced to zero; a faulted episode
/// is discarded and resampled from a fresh stream.
pub fn collect_iteration(
    variant: MethodVariant,
    env: &PickPlaceEnv,
    operator: &Operator,
    sigma: &DisturbanceLevel,
    episodes: u32,
    root_seed: u64,
    k: u32,
) -> Result<Vec<Trajectory>, LearnerError> {
    if episodes == 0 {
        return Err(LearnerError::Config("episodes must be >= 1".into()));
    }
    let effective = if variant.uses_disturbance() { *sigma } else { DisturbanceLevel::zero(sigma.iteration_k) };
    let mut out = Vec::with_capacity(episodes as usize);
    for e in 0..episodes {
        let mut collected = None;
        for attempt in 0..MAX_EPISODE_ATTEMPTS {
            let seed = RngStream::derive(root_seed, &["collect".to_string(), format!("k{k}"), format!("e{e}"), format!("a{attempt}")])
                .expect("path")
                .next_u64();
            match collect_episode(variant.regime(), env, operator, &effective, seed, e, k) {
                Ok(t) => {
                    collected = Some(t);
                    break;
                }
                Err(err) => log::warn!("iteration {k} episode {e} attempt {attempt}: {err}; resampling"),
            }
        }
        out.push(collected.ok_or(LearnerError::CollectionFailed { k, episode: e, attempts: MAX_EPISODE_ATTEMPTS })?);
    }
    Ok(out)
}

/// Fits a bundle on the union of all trajectories collected so far.
pub fn fit_iteration(
    variant: MethodVariant,
    trajectories: &[Trajectory],
    spec: &TrainSpec,
    label: LabelSource,
) -> Result<PolicyBundle, LearnerError> {
    let manual = ManualModes::default();
    let data = build_datasets(trajectories, variant.layout(), label, manual)?;
    Ok(fit_bundle(&data, variant.layout(), manual, spec)?)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_objects_moved: f64,
    pub mean_episode_length: f64,
    pub illegal_transitions: usize,
    /// Σ used at each iteration so far, for plotting alongside performance.
    #[serde(default)]
    pub sigma_trace: Vec<[f64; ACTION_DIM]>,
}

/// Closed-loop test episodes without disturbance. Episode `i` resets from
/// the stream `(seed, ["eval", i])`, so every method sees the same starts.
pub fn evaluate<P: Imitator + ?Sized>(policy: &P, env: &PickPlaceEnv, episodes: usize, seed: u64) -> (EvalMetrics, Vec<Trajectory>) {
    let mut trajs = Vec::with_capacity(episodes);
    for i in 0..episodes {
        let mut rng = RngStream::derive(seed, &["eval".to_string(), format!("{i}")]).expect("path");
        trajs.push(policy::rollout(policy, env, &mut rng, i as u32, 0));
    }
    let n = episodes.max(1) as f64;
    let metrics = EvalMetrics {
        episodes,
        success_rate: if episodes == 0 { 0.0 } else { trajs.iter().filter(|t| t.success).count() as f64 / n },
        mean_objects_moved: trajs.iter().map(|t| t.terminal.moved_count as f64).sum::<f64>() / n,
        mean_episode_length: trajs.iter().map(|t| t.len() as f64).sum::<f64>() / n,
        illegal_transitions: trajs.iter().map(Trajectory::illegal_transitions).sum(),
        sigma_trace: Vec::new(),
    };
    (metrics, trajs)
}

/// One (method, seed) experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentCell {
    pub variant: MethodVariant,
    pub env: EnvConfig,
    pub operator: OperatorConfig,
    pub train: TrainSpec,
    pub iterations: u32,
    pub episodes: u32,
    pub eval_episodes: usize,
    pub root_seed: u64,
    pub sigma_reading: SigmaReading,
}

impl ExperimentCell {
    pub fn new(variant: MethodVariant, env: EnvConfig, root_seed: u64) -> Self {
        Self {
            variant,
            env,
            operator: OperatorConfig::default(),
            train: TrainSpec::default(),
            iterations: 5,
            episodes: 10,
            eval_episodes: 10,
            root_seed,
            sigma_reading: SigmaReading::default(),
        }
    }

    /// Training seed for iteration `k`, derived from the root seed.
    pub fn train_seed(&self, k: u32) -> u64 {
        RngStream::derive(self.root_seed, &["fit".to_string(), format!("k{k}")]).expect("path").next_u64()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRows {
    pub switch: usize,
    pub action: usize,
}

#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub k: u32,
    pub sigma_used: DisturbanceLevel,
    pub trajectories: Vec<Trajectory>,
    pub bundle: PolicyBundle,
    pub sigma_next: SigmaUpdate,
    pub manual_nll: Option<f64>,
    pub train_rows: TrainRows,
    pub collection_success_rate: f64,
    pub eval: EvalMetrics,
}

/// Serialised per-iteration summary (`metrics.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub k: u32,
    pub variant: MethodVariant,
    pub root_seed: u64,
    pub sigma_used: [f64; ACTION_DIM],
    pub sigma_next: [f64; ACTION_DIM],
    pub sigma_selected_steps: usize,
    pub manual_nll: Option<f64>,
    pub train_rows: TrainRows,
    pub demo_steps: usize,
    pub collection_success_rate: f64,
    pub eval: EvalMetrics,
}

impl IterationRecord {
    pub fn summary(&self, cell: &ExperimentCell) -> IterationSummary {
        IterationSummary {
            k: self.k,
            variant: cell.variant,
            root_seed: cell.root_seed,
            sigma_used: self.sigma_used.sigma,
            sigma_next: self.sigma_next.level.sigma,
            sigma_selected_steps: self.sigma_next.selected_steps,
            manual_nll: self.manual_nll,
            train_rows: self.train_rows.clone(),
            demo_steps: self.trajectories.iter().map(Trajectory::len).sum(),
            collection_success_rate: self.collection_success_rate,
            eval: self.eval.clone(),
        }
    }

    pub fn persist(&self, cell: &ExperimentCell, dir: &Path) -> Result<(), LearnerError> {
        std::fs::create_dir_all(dir)?;
        trajfile::write_file(&self.trajectories, &dir.join("trajectories.jsonl"))?;
        self.bundle.save(&dir.join("bundle")).map_err(LearnerError::Policy)?;
        std::fs::write(
            dir.join("sigma.json"),
            serde_json::to_vec_pretty(&serde_json::json!({
                "sigma_used": self.sigma_used,
                "sigma_next": self.sigma_next,
            }))?,
        )?;
        std::fs::write(dir.join("metrics.json"), serde_json::to_vec_pretty(&self.summary(cell))?)?;
        Ok(())
    }
}

pub fn iteration_dir(cell_dir: &Path, k: u32) -> PathBuf {
    cell_dir.join(format!("iter-{k}"))
}

/// A run that stopped early, with the iterations that did complete.
#[derive(Debug)]
pub struct ExperimentFailure {
    pub records: Vec<IterationRecord>,
    pub error: LearnerError,
}

impl fmt::Display for ExperimentFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "experiment halted after {} iteration(s): {}", self.records.len(), self.error)
    }
}

impl std::error::Error for ExperimentFailure {}

/// Runs the full iterative loop for one cell, persisting each iteration
/// under `out` when given.
pub fn run_experiment(cell: &ExperimentCell, out: Option<&Path>) -> Result<Vec<IterationRecord>, ExperimentFailure> {
    let mut records = Vec::new();
    match run_inner(cell, out, &mut records) {
        Ok(()) => Ok(records),
        Err(error) => Err(ExperimentFailure { records, error }),
    }
}

fn run_inner(cell: &ExperimentCell, out: Option<&Path>, records: &mut Vec<IterationRecord>) -> Result<(), LearnerError> {
    if cell.iterations == 0 || cell.episodes == 0 {
        return Err(LearnerError::Config("iterations and episodes must be >= 1".into()));
    }
    let env = PickPlaceEnv::new(cell.env.clone())?;
    let operator = Operator::new(cell.operator.clone(), cell.env.clone())?;
    let ctx = SigmaContext {
        variant: cell.variant,
        reading: cell.sigma_reading,
        label: cell.operator.label_source,
        operator: Some(&operator),
    };
    let mut sigma = DisturbanceLevel::zero(1);
    let mut aggregate: Vec<Trajectory> = Vec::new();
    let mut trace = Vec::new();

    for k in 1..=cell.iterations {
        let trajectories = collect_iteration(cell.variant, &env, &operator, &sigma, cell.episodes, cell.root_seed, k)?;
        aggregate.extend(trajectories.iter().cloned());

        let spec = TrainSpec { seed: cell.train_seed(k), ..cell.train.clone() };
        let bundle = fit_iteration(cell.variant, &aggregate, &spec, cell.operator.label_source)?;
        let sigma_next = update_sigma(&ctx, &trajectories, &bundle, &sigma)?;
        let manual_nll = if sigma_next.level.sigma.iter().all(|&s| s > 0.0) {
            manual_nll(&ctx, &trajectories, &bundle, &sigma_next.level).ok()
        } else {
            None
        };

        trace.push(sigma.sigma);
        let (mut eval, _) = evaluate(&bundle, &env, cell.eval_episodes, cell.root_seed);
        eval.sigma_trace = trace.clone();

        let train_rows = TrainRows {
            switch: bundle.switch_net.as_ref().and_then(|n| n.report.as_ref()).map(|r| r.train_rows + r.val_rows).unwrap_or(0),
            action: bundle.action_nets.iter().filter_map(|a| a.net.report.as_ref()).map(|r| r.train_rows + r.val_rows).sum(),
        };
        let record = IterationRecord {
            k,
            sigma_used: sigma,
            collection_success_rate: trajectories.iter().filter(|t| t.success).count() as f64 / trajectories.len() as f64,
            trajectories,
            bundle,
            sigma_next: sigma_next.clone(),
            manual_nll,
            train_rows,
            eval,
        };
        log::info!(
            "{} seed {} k={k}: success {:.2}, Σ_next {:?}",
            cell.variant,
            cell.root_seed,
            record.eval.success_rate,
            record.sigma_next.level.sigma
        );
        if let Some(dir) = out {
            record.persist(cell, &iteration_dir(dir, k))?;
        }
        records.push(record);
        sigma = sigma_next.level;
    }
    Ok(())
}
