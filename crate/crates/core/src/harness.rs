//! Experiment drivers: configuration, cell planning, sweeps, evaluation of
//! saved bundles, and CSV report emission.
//!
//! Artifact layout, rooted at the output directory:
//!
//! ```text
//! manifest.json
//! <condition>/<method>/seed-<s>/cell.json
//! <condition>/<method>/seed-<s>/iter-<k>/{trajectories.jsonl, bundle/, sigma.json, metrics.json}
//! report/*.csv                      (written by `report`)
//! ```

use crate::env::{EnvConfig, PickPlaceEnv, Threshold};
use crate::learner::{
    self, evaluate, fit_iteration, iteration_dir, EvalMetrics, ExperimentCell, IterationRecord, IterationSummary,
    LearnerError, MethodVariant, SigmaReading,
};
use crate::nn::TrainSpec;
use crate::operator::OperatorConfig;
use crate::policy::{PolicyBundle, PolicyError};
use crate::trajfile::{self, TrajFileError};
use crate::types::{Regime, ACTION_DIM};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("config file: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("no records under {0}")]
    NoRecords(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    TrajFile(#[from] TrajFileError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let bytes = serde_json::to_vec_pretty(value).map_err(|source| HarnessError::Json { path: path.into(), source })?;
    std::fs::write(path, bytes).map_err(io_err(path))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, HarnessError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|source| HarnessError::Json { path: path.into(), source })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub methods: Vec<MethodVariant>,
    /// Iterations K.
    pub iterations: u32,
    /// Demonstration episodes per iteration E.
    pub episodes: u32,
    pub seeds: Vec<u64>,
    pub eval_episodes: usize,
    pub output_dir: PathBuf,
    pub sigma_reading: SigmaReading,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            methods: MethodVariant::ALL.to_vec(),
            iterations: 5,
            episodes: 10,
            seeds: vec![0, 1, 2],
            eval_episodes: 10,
            output_dir: PathBuf::from("runs"),
            sigma_reading: SigmaReading::default(),
        }
    }
}

/// Full experiment configuration, read from TOML. Every key is optional;
/// `[env]` defaults follow `n_objects` (so `t_max` scales with it unless
/// given explicitly).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub env: EnvConfig,
    pub operator: OperatorConfig,
    /// `seed` here is ignored: each iteration's training seed is derived
    /// from the cell's root seed.
    pub train: TrainSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentSection::default(),
            env: EnvConfig::with_objects(1),
            operator: OperatorConfig::default(),
            train: TrainSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let mut table: toml::Table = text.parse()?;
        for key in table.keys() {
            if !["experiment", "env", "operator", "train"].contains(&key.as_str()) {
                return Err(HarnessError::Config(format!("unknown section `{key}`")));
            }
        }
        let section = |t: &mut toml::Table, name: &str| t.remove(name).unwrap_or_else(|| toml::Value::Table(Default::default()));

        let experiment: ExperimentSection = section(&mut table, "experiment").try_into()?;
        let operator: OperatorConfig = section(&mut table, "operator").try_into()?;
        let train: TrainSpec = section(&mut table, "train").try_into()?;

        let env_overrides = match section(&mut table, "env") {
            toml::Value::Table(t) => t,
            _ => return Err(HarnessError::Config("`env` must be a table".into())),
        };
        let n = match env_overrides.get("n_objects") {
            None => 1,
            Some(toml::Value::Integer(n)) if *n >= 0 => *n as usize,
            Some(other) => return Err(HarnessError::Config(format!("env.n_objects must be a non-negative integer, got {other}"))),
        };
        let mut env_table = toml::Table::try_from(EnvConfig::with_objects(n)).expect("env config serialises");
        for (k, v) in env_overrides {
            if !env_table.contains_key(&k) {
                return Err(HarnessError::Config(format!("unknown env key `{k}`")));
            }
            env_table.insert(k, v);
        }
        let env: EnvConfig = toml::Value::Table(env_table).try_into()?;

        let config = Self { experiment, env, operator, train };
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let e = &self.experiment;
        if e.iterations == 0 {
            return Err(HarnessError::Config("iterations must be >= 1".into()));
        }
        if e.episodes == 0 {
            return Err(HarnessError::Config("episodes must be >= 1".into()));
        }
        if e.seeds.is_empty() {
            return Err(HarnessError::Config("seeds must be non-empty".into()));
        }
        if e.methods.is_empty() {
            return Err(HarnessError::Config("methods must be non-empty".into()));
        }
        self.env.validate().map_err(|err| HarnessError::Config(err.to_string()))?;
        self.operator.validate().map_err(|err| HarnessError::Config(err.to_string()))?;
        self.train.validate().map_err(|err| HarnessError::Config(err.to_string()))?;
        Ok(())
    }

    pub fn cell(&self, variant: MethodVariant, env: EnvConfig, seed: u64) -> ExperimentCell {
        ExperimentCell {
            variant,
            env,
            operator: self.operator.clone(),
            train: self.train.clone(),
            iterations: self.experiment.iterations,
            episodes: self.experiment.episodes,
            eval_episodes: self.experiment.eval_episodes,
            root_seed: seed,
            sigma_reading: self.experiment.sigma_reading,
        }
    }
}

/// Label of an environment condition, e.g. `n2-L`.
pub fn condition_label(env: &EnvConfig) -> String {
    format!("n{}-{}", env.n_objects, env.auto2_threshold.label())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweep {
    /// Object count 1, 2, 3 at the configured threshold.
    ObjectCount,
    /// Thresholds L, M, S with two objects.
    Threshold,
}

impl std::str::FromStr for Sweep {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "p1" | "objects" => Ok(Sweep::ObjectCount),
            "p2" | "thresholds" => Ok(Sweep::Threshold),
            _ => Err(format!("unknown sweep `{s}` (expected p1 or p2)")),
        }
    }
}

impl Sweep {
    /// Environment conditions derived from `base`; `t_max` is rescaled
    /// with the object count.
    pub fn conditions(self, base: &EnvConfig) -> Vec<EnvConfig> {
        let with = |n: usize, thr: Threshold| EnvConfig {
            n_objects: n,
            t_max: EnvConfig::with_objects(n).t_max,
            auto2_threshold: thr,
            ..base.clone()
        };
        match self {
            Sweep::ObjectCount => (1..=3).map(|n| with(n, base.auto2_threshold)).collect(),
            Sweep::Threshold => [Threshold::L, Threshold::M, Threshold::S].into_iter().map(|t| with(2, t)).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlannedCell {
    pub condition: String,
    pub cell: ExperimentCell,
}

impl PlannedCell {
    pub fn relative_dir(&self) -> PathBuf {
        PathBuf::from(&self.condition).join(self.cell.variant.slug()).join(format!("seed-{}", self.cell.root_seed))
    }
}

/// Every (condition, method, seed) combination.
pub fn plan_cells(config: &ExperimentConfig, conditions: &[EnvConfig]) -> Vec<PlannedCell> {
    let mut out = Vec::new();
    for env in conditions {
        for &m in &config.experiment.methods {
            for &seed in &config.experiment.seeds {
                out.push(PlannedCell { condition: condition_label(env), cell: config.cell(m, env.clone(), seed) });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Complete,
    Partial,
}

/// `cell.json`: what was planned and how far it got.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub condition: String,
    pub status: CellStatus,
    pub completed_iterations: u32,
    pub error: Option<String>,
    pub cell: ExperimentCell,
}

#[derive(Debug)]
pub struct CellOutcome {
    pub planned: PlannedCell,
    pub records: Vec<IterationRecord>,
    pub error: Option<String>,
}

impl CellOutcome {
    pub fn record(&self) -> CellRecord {
        CellRecord {
            condition: self.planned.condition.clone(),
            status: if self.error.is_none() { CellStatus::Complete } else { CellStatus::Partial },
            completed_iterations: self.records.len() as u32,
            error: self.error.clone(),
            cell: self.planned.cell.clone(),
        }
    }

    pub fn final_eval(&self) -> Option<&EvalMetrics> {
        self.records.last().map(|r| &r.eval)
    }
}

/// Runs cells in parallel. With `out`, each cell persists its iterations
/// and a `cell.json`, and a `manifest.json` lists them all.
pub fn run_cells(cells: &[PlannedCell], out: Option<&Path>) -> Result<Vec<CellOutcome>, HarnessError> {
    let outcomes: Vec<CellOutcome> = cells
        .par_iter()
        .map(|planned| {
            let dir = out.map(|o| o.join(planned.relative_dir()));
            let (records, error) = match learner::run_experiment(&planned.cell, dir.as_deref()) {
                Ok(r) => (r, None),
                Err(f) => {
                    log::error!("{} {} seed {}: {f}", planned.condition, planned.cell.variant, planned.cell.root_seed);
                    (f.records, Some(f.error.to_string()))
                }
            };
            CellOutcome { planned: planned.clone(), records, error }
        })
        .collect();
    if let Some(out) = out {
        let mut manifest = Vec::new();
        for o in &outcomes {
            let rel = o.planned.relative_dir();
            let dir = out.join(&rel);
            std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            write_json(&dir.join("cell.json"), &o.record())?;
            manifest.push(serde_json::json!({
                "dir": rel,
                "condition": o.planned.condition,
                "method": o.planned.cell.variant,
                "seed": o.planned.cell.root_seed,
                "status": o.record().status,
            }));
        }
        write_json(&out.join("manifest.json"), &serde_json::json!({ "cells": manifest }))?;
    }
    Ok(outcomes)
}

/// Runs every configured method and seed on the configured environment.
/// Returns the artifact directory.
pub fn cmd_run(config: &ExperimentConfig) -> Result<PathBuf, HarnessError> {
    config.validate()?;
    let out = config.experiment.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;
    let cells = plan_cells(config, std::slice::from_ref(&config.env));
    run_cells(&cells, Some(&out))?;
    Ok(out)
}

pub fn cmd_sweep(config: &ExperimentConfig, sweep: Sweep) -> Result<PathBuf, HarnessError> {
    config.validate()?;
    let out = config.experiment.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;
    let cells = plan_cells(config, &sweep.conditions(&config.env));
    run_cells(&cells, Some(&out))?;
    Ok(out)
}

/// Trains each configured method once on recorded demonstrations (for
/// example teleoperation sessions) and evaluates it. Full-manual methods
/// ignore the recorded modes. Writes `from-demos/<method>/{bundle/, metrics.json}`.
pub fn cmd_run_from_demos(config: &ExperimentConfig, demos: &[PathBuf]) -> Result<PathBuf, HarnessError> {
    config.validate()?;
    let mut trajectories = Vec::new();
    for path in demos {
        trajectories.extend(trajfile::read_file(path)?);
    }
    if trajectories.is_empty() {
        return Err(HarnessError::Config("demonstration files contain no episodes".into()));
    }
    let env = PickPlaceEnv::new(config.env.clone()).map_err(|e| HarnessError::Config(e.to_string()))?;
    let out = config.experiment.output_dir.join("from-demos");
    let seed = config.experiment.seeds[0];
    for &m in &config.experiment.methods {
        let mut data = trajectories.clone();
        if m.regime() == Regime::FullManual {
            data.iter_mut().flat_map(|t| t.steps.iter_mut()).for_each(|s| s.mode = None);
        } else if data.iter().any(|t| t.regime != Regime::PartialAutomation) {
            return Err(HarnessError::Config(format!("{m} needs partially automated demonstrations")));
        }
        let spec = TrainSpec { seed, ..config.train.clone() };
        let bundle = fit_iteration(m, &data, &spec, config.operator.label_source)?;
        let (metrics, _) = evaluate(&bundle, &env, config.experiment.eval_episodes, seed);
        let dir = out.join(m.slug());
        bundle.save(&dir.join("bundle"))?;
        write_json(&dir.join("metrics.json"), &metrics)?;
    }
    Ok(out)
}

/// Loads a saved bundle and runs `episodes` undisturbed test episodes.
pub fn cmd_eval(bundle_dir: &Path, env: &EnvConfig, episodes: usize, seed: u64) -> Result<EvalMetrics, HarnessError> {
    let bundle = PolicyBundle::load(bundle_dir)?;
    if bundle.n_objects != env.n_objects {
        return Err(HarnessError::Config(format!(
            "bundle was trained for {} object(s), environment has {}",
            bundle.n_objects, env.n_objects
        )));
    }
    let env = PickPlaceEnv::new(env.clone()).map_err(|e| HarnessError::Config(e.to_string()))?;
    Ok(evaluate(&bundle, &env, episodes, seed).0)
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One cell as read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedCell {
    pub dir: PathBuf,
    pub record: CellRecord,
    pub iterations: Vec<IterationSummary>,
}

fn find_cells(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), HarnessError> {
    if dir.join("cell.json").is_file() {
        out.push(dir.to_path_buf());
        return Ok(());
    }
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_dir() {
            find_cells(&path, out)?;
        }
    }
    Ok(())
}

pub fn load_cells(root: &Path) -> Result<Vec<LoadedCell>, HarnessError> {
    if !root.is_dir() {
        return Err(HarnessError::NoRecords(root.to_path_buf()));
    }
    let mut dirs = Vec::new();
    find_cells(root, &mut dirs)?;
    dirs.sort();
    let mut cells = Vec::new();
    for dir in dirs {
        let record: CellRecord = read_json(&dir.join("cell.json"))?;
        let mut iterations = Vec::new();
        for k in 1..=record.completed_iterations {
            iterations.push(read_json(&iteration_dir(&dir, k).join("metrics.json"))?);
        }
        cells.push(LoadedCell { dir, record, iterations });
    }
    if cells.is_empty() {
        return Err(HarnessError::NoRecords(root.to_path_buf()));
    }
    Ok(cells)
}

pub const SUCCESS_FINAL_COLUMNS: [&str; 8] =
    ["condition", "method", "seeds", "success_mean", "success_std_population", "moved_mean", "moved_std_population", "partial_cells"];
pub const SUCCESS_BY_ITERATION_COLUMNS: [&str; 6] =
    ["condition", "method", "iteration", "seeds", "success_mean", "success_std_population"];
pub const SIGMA_SERIES_COLUMNS: [&str; 12] = [
    "condition", "method", "iteration", "seeds",
    "sigma_dx_mean", "sigma_dy_mean", "sigma_dz_mean", "sigma_dtheta_mean",
    "sigma_dx_std_population", "sigma_dy_std_population", "sigma_dz_std_population", "sigma_dtheta_std_population",
];
pub const NLL_SERIES_COLUMNS: [&str; 6] = ["condition", "method", "iteration", "seeds", "nll_mean", "nll_std_population"];
pub const PARTIAL_CELLS_COLUMNS: [&str; 6] = ["condition", "method", "seed", "completed_iterations", "planned_iterations", "error"];

/// Report tables as rows of strings, in column order.
#[derive(Debug, Clone, Default)]
pub struct Report {
    pub success_final: Vec<Vec<String>>,
    pub success_by_iteration: Vec<Vec<String>>,
    pub sigma_series: Vec<Vec<String>>,
    pub nll_series: Vec<Vec<String>>,
    pub partial_cells: Vec<Vec<String>>,
}

type GroupKey = (String, MethodVariant);

/// Aggregates loaded cells. Final success uses complete cells only;
/// partial cells are counted in `partial_cells` and listed separately, and
/// still contribute to the per-iteration series for iterations they
/// finished.
pub fn build_report(cells: &[LoadedCell]) -> Report {
    let mut groups: BTreeMap<GroupKey, Vec<&LoadedCell>> = BTreeMap::new();
    for c in cells {
        groups.entry((c.record.condition.clone(), c.record.cell.variant)).or_default().push(c);
    }
    let f = |x: f64| format!("{x}");
    let mut report = Report::default();
    for ((condition, method), members) in &groups {
        let complete: Vec<_> = members.iter().filter(|c| c.record.status == CellStatus::Complete).collect();
        let partial = members.len() - complete.len();
        let finals: Vec<&EvalMetrics> = complete.iter().filter_map(|c| c.iterations.last()).map(|s| &s.eval).collect();
        let (sm, ss) = mean_std(&finals.iter().map(|e| e.success_rate).collect::<Vec<_>>());
        let (mm, ms) = mean_std(&finals.iter().map(|e| e.mean_objects_moved).collect::<Vec<_>>());
        report.success_final.push(vec![
            condition.clone(), method.to_string(), finals.len().to_string(), f(sm), f(ss), f(mm), f(ms), partial.to_string(),
        ]);

        let max_k = members.iter().map(|c| c.iterations.len()).max().unwrap_or(0);
        for k in 0..max_k {
            let at_k: Vec<&IterationSummary> = members.iter().filter_map(|c| c.iterations.get(k)).collect();
            let base = vec![condition.clone(), method.to_string(), (k + 1).to_string(), at_k.len().to_string()];

            let (m, s) = mean_std(&at_k.iter().map(|i| i.eval.success_rate).collect::<Vec<_>>());
            report.success_by_iteration.push([base.clone(), vec![f(m), f(s)]].concat());

            let mut means = Vec::new();
            let mut stds = Vec::new();
            for d in 0..ACTION_DIM {
                let (m, s) = mean_std(&at_k.iter().map(|i| i.sigma_used[d]).collect::<Vec<_>>());
                means.push(f(m));
                stds.push(f(s));
            }
            report.sigma_series.push([base.clone(), means, stds].concat());

            let nlls: Vec<f64> = at_k.iter().filter_map(|i| i.manual_nll).collect();
            if !nlls.is_empty() {
                let (m, s) = mean_std(&nlls);
                let mut row = base.clone();
                row[3] = nlls.len().to_string();
                report.nll_series.push([row, vec![f(m), f(s)]].concat());
            }
        }
        for c in members.iter().filter(|c| c.record.status == CellStatus::Partial) {
            report.partial_cells.push(vec![
                condition.clone(),
                method.to_string(),
                c.record.cell.root_seed.to_string(),
                c.record.completed_iterations.to_string(),
                c.record.cell.iterations.to_string(),
                c.record.error.clone().unwrap_or_default(),
            ]);
        }
    }
    report
}

fn write_csv(path: &Path, columns: &[&str], rows: &[Vec<String>]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(columns)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Reads every cell under `root` and writes the CSV tables to
/// `root/report/`. Partial cells are reported with a warning.
pub fn cmd_report(root: &Path) -> Result<(Report, PathBuf), HarnessError> {
    let cells = load_cells(root)?;
    let report = build_report(&cells);
    for row in &report.partial_cells {
        log::warn!("partial cell: {}", row.join(" "));
    }
    let dir = root.join("report");
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write_csv(&dir.join("success_final.csv"), &SUCCESS_FINAL_COLUMNS, &report.success_final)?;
    write_csv(&dir.join("success_by_iteration.csv"), &SUCCESS_BY_ITERATION_COLUMNS, &report.success_by_iteration)?;
    write_csv(&dir.join("sigma_series.csv"), &SIGMA_SERIES_COLUMNS, &report.sigma_series)?;
    write_csv(&dir.join("nll_series.csv"), &NLL_SERIES_COLUMNS, &report.nll_series)?;
    write_csv(&dir.join("partial_cells.csv"), &PARTIAL_CELLS_COLUMNS, &report.partial_cells)?;
    Ok((report, dir))
}
