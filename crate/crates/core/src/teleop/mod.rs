//! Live demonstration sessions.
//!
//! [`Session`] is a pure message-driven state machine: clients send
//! [`ClientMessage`]s, a clock calls [`Session::tick`] every
//! [`TICK_MS`] ms, and every call returns the [`ServerMessage`]s to send
//! back. [`server`] puts it behind a WebSocket.
//!
//! On each tick while an episode runs, the most recent human action (held
//! until replaced, zero before the first one) is disturbed with Σ in manual
//! modes, or replaced by the automatic action in automatic modes, and the
//! simulator advances one step.

pub mod server;

use crate::env::{EnvConfig, EnvState, PickPlaceEnv, Threshold};
use crate::operator::{auto_action, inject_disturbance};
use crate::rng::RngStream;
use crate::trajfile;
use crate::types::{ActionDelta, DisturbanceLevel, Mode, Regime, Step, Trajectory, ACTION_DIM};
use serde::{Deserialize, Serialize};
use std::io::BufRead;
use std::path::{Path, PathBuf};

pub const TICK_MS: u64 = 50;
pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum TeleopError {
    #[error("no steps recorded in this episode")]
    EmptyEpisode,
    #[error("no episode has been started")]
    NotStarted,
    #[error("writing {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Environment choice sent with `start`; omitted fields take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub n_objects: usize,
    pub auto2_threshold: Threshold,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self { n_objects: 1, auto2_threshold: Threshold::L }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    Hello {
        #[serde(default)]
        client: Option<String>,
    },
    Start {
        #[serde(default)]
        config: Option<SessionConfig>,
        #[serde(default)]
        sigma: Option<[f64; ACTION_DIM]>,
        #[serde(default)]
        seed: Option<u64>,
    },
    Action {
        dx: f64,
        dy: f64,
        dz: f64,
        dtheta: f64,
    },
    SwitchMode {
        /// Requested mode; the next mode in the cycle when omitted.
        #[serde(default)]
        to: Option<u8>,
    },
    Reset,
    Save,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Welcome {
        version: u32,
        tick_ms: u64,
        manual_modes: Vec<u8>,
    },
    Started {
        episode_id: u32,
        n_objects: usize,
        auto2_threshold: Threshold,
        sigma: [f64; ACTION_DIM],
        seed: u64,
    },
    State {
        tick: u64,
        gripper: [f64; 4],
        objects: Vec<[f64; 3]>,
        mode: u8,
        intended: [f64; ACTION_DIM],
        executed: [f64; ACTION_DIM],
        moved_count: usize,
        done: bool,
        success: bool,
    },
    Ack {
        of: String,
        mode: u8,
        /// For `action`: whether it will be executed (false in automatic modes).
        #[serde(default, skip_serializing_if = "Option::is_none")]
        applied: Option<bool>,
    },
    Nack {
        of: String,
        reason: String,
        allowed: Vec<u8>,
    },
    Saved {
        path: String,
        steps: usize,
    },
    Error {
        reason: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Idle,
    Running,
    Saved,
}

struct Episode {
    env: PickPlaceEnv,
    state: EnvState,
    noise: RngStream,
    steps: Vec<Step>,
    tick: u64,
    episode_id: u32,
}

pub struct Session {
    out_dir: PathBuf,
    sigma: DisturbanceLevel,
    seed: u64,
    config: SessionConfig,
    pending: ActionDelta,
    episode: Option<Episode>,
    next_episode_id: u32,
    phase: Phase,
}

impl Session {
    /// `sigma` and `seed` are used unless a `start` message overrides them.
    pub fn new(out_dir: impl Into<PathBuf>, sigma: DisturbanceLevel, seed: u64) -> Self {
        Self {
            out_dir: out_dir.into(),
            sigma,
            seed,
            config: SessionConfig::default(),
            pending: ActionDelta::ZERO,
            episode: None,
            next_episode_id: 0,
            phase: Phase::Idle,
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn mode(&self) -> Option<Mode> {
        self.episode.as_ref().map(|e| e.state.mode)
    }

    pub fn sigma(&self) -> &DisturbanceLevel {
        &self.sigma
    }

    pub fn steps(&self) -> &[Step] {
        self.episode.as_ref().map(|e| e.steps.as_slice()).unwrap_or(&[])
    }

    /// Parses and handles one text frame.
    pub fn handle_text(&mut self, text: &str) -> Vec<ServerMessage> {
        match serde_json::from_str::<ClientMessage>(text) {
            Ok(msg) => self.handle(msg),
            Err(e) => vec![ServerMessage::Error { reason: format!("malformed message: {e}") }],
        }
    }

    pub fn handle(&mut self, msg: ClientMessage) -> Vec<ServerMessage> {
        match msg {
            ClientMessage::Hello { .. } => vec![ServerMessage::Welcome {
                version: PROTOCOL_VERSION,
                tick_ms: TICK_MS,
                manual_modes: vec![Mode::REACH.index() as u8, Mode::PLACE.index() as u8],
            }],
            ClientMessage::Start { config, sigma, seed } => {
                if let Some(s) = sigma {
                    match DisturbanceLevel::new(s, 0) {
                        Ok(level) => self.sigma = level,
                        Err(e) => return vec![error(format!("invalid sigma: {e}"))],
                    }
                }
                if let Some(c) = config {
                    self.config = c;
                }
                if let Some(s) = seed {
                    self.seed = s;
                }
                self.begin()
            }
            ClientMessage::Reset => {
                if self.episode.is_none() {
                    return vec![error(TeleopError::NotStarted.to_string())];
                }
                self.begin()
            }
            ClientMessage::Action { dx, dy, dz, dtheta } => {
                let a = ActionDelta::new(dx, dy, dz, dtheta);
                if !a.is_finite() {
                    return vec![error("action components must be finite".into())];
                }
                let Some(ep) = self.episode.as_ref() else {
                    return vec![error(TeleopError::NotStarted.to_string())];
                };
                self.pending = a.clamped();
                let mode = ep.state.mode;
                vec![ServerMessage::Ack { of: "action".into(), mode: mode.index() as u8, applied: Some(mode.is_manual()) }]
            }
            ClientMessage::SwitchMode { to } => self.switch(to),
            ClientMessage::Save => match self.save_episode() {
                Ok((path, steps)) => vec![ServerMessage::Saved { path: path.display().to_string(), steps }],
                Err(e) => vec![error(e.to_string())],
            },
        }
    }

    fn begin(&mut self) -> Vec<ServerMessage> {
        let env_config = EnvConfig {
            auto2_threshold: self.config.auto2_threshold,
            ..EnvConfig::with_objects(self.config.n_objects)
        };
        let env = match PickPlaceEnv::new(env_config) {
            Ok(env) => env,
            Err(e) => return vec![error(format!("invalid config: {e}"))],
        };
        let episode_id = self.next_episode_id;
        self.next_episode_id += 1;
        let path = |purpose: &str| vec!["teleop".to_string(), format!("e{episode_id}"), purpose.to_string()];
        let mut reset_rng = RngStream::derive(self.seed, &path("reset")).expect("path");
        let noise = RngStream::derive(self.seed, &path("noise")).expect("path");
        let state = env.reset(&mut reset_rng);
        let n_objects = env.config().n_objects;
        let auto2_threshold = env.config().auto2_threshold;
        self.episode = Some(Episode { env, state, noise, steps: Vec::new(), tick: 0, episode_id });
        self.pending = ActionDelta::ZERO;
        self.phase = Phase::Running;
        vec![
            ServerMessage::Started { episode_id, n_objects, auto2_threshold, sigma: self.sigma.sigma, seed: self.seed },
            self.state_message(ActionDelta::ZERO, ActionDelta::ZERO),
        ]
    }

    fn switch(&mut self, to: Option<u8>) -> Vec<ServerMessage> {
        let Some(ep) = self.episode.as_mut() else {
            return vec![error(TeleopError::NotStarted.to_string())];
        };
        let current = ep.state.mode;
        let allowed = vec![current.index() as u8, current.next().index() as u8];
        let target = match to {
            None => Some(current.next()),
            Some(m) => Mode::new(m).ok().filter(|m| current.can_switch_to(*m)),
        };
        match target {
            Some(m) => {
                ep.state.mode = m;
                vec![ServerMessage::Ack { of: "switch_mode".into(), mode: m.index() as u8, applied: None }]
            }
            None => vec![ServerMessage::Nack {
                of: "switch_mode".into(),
                reason: format!("mode {} can switch only to {:?}", current.index(), allowed),
                allowed,
            }],
        }
    }

    /// Advances the running episode by one step. Does nothing when idle,
    /// saved, or when the episode has finished.
    pub fn tick(&mut self) -> Vec<ServerMessage> {
        if self.phase != Phase::Running {
            return Vec::new();
        }
        let sigma = self.sigma;
        let pending = self.pending;
        let Some(ep) = self.episode.as_mut() else {
            return Vec::new();
        };
        if ep.env.is_done(&ep.state) {
            return Vec::new();
        }
        let mode = ep.state.mode;
        let (intended, executed) = if mode.is_manual() {
            let executed = inject_disturbance(pending, &sigma, &mut ep.noise).expect("sigma validated on start");
            (pending, executed)
        } else {
            let a = auto_action(mode).expect("automatic mode");
            (a, a)
        };
        ep.steps.push(Step {
            t: ep.state.t,
            state_full: ep.state.features(),
            action_intended: intended,
            action_executed: executed,
            mode: Some(mode),
            episode_id: ep.episode_id,
            iteration_k: 0,
        });
        ep.state = ep.env.step(&ep.state, executed);
        ep.tick += 1;
        vec![self.state_message(intended, executed)]
    }

    fn state_message(&self, intended: ActionDelta, executed: ActionDelta) -> ServerMessage {
        let ep = self.episode.as_ref().expect("episode running");
        let s = ep.state.summary();
        ServerMessage::State {
            tick: ep.tick,
            gripper: s.gripper,
            objects: s.objects,
            mode: ep.state.mode.index() as u8,
            intended: intended.to_array(),
            executed: executed.to_array(),
            moved_count: s.moved_count,
            done: ep.env.is_done(&ep.state),
            success: ep.env.is_success(&ep.state),
        }
    }

    /// The current episode as a trajectory.
    pub fn trajectory(&self) -> Result<Trajectory, TeleopError> {
        let ep = self.episode.as_ref().ok_or(TeleopError::NotStarted)?;
        if ep.steps.is_empty() {
            return Err(TeleopError::EmptyEpisode);
        }
        Ok(Trajectory {
            episode_id: ep.episode_id,
            iteration_k: 0,
            seed: self.seed,
            regime: Regime::PartialAutomation,
            sigma: self.sigma.sigma,
            steps: ep.steps.clone(),
            terminal: ep.state.summary(),
            success: ep.env.is_success(&ep.state),
        })
    }

    /// Writes the current episode to `<out_dir>/episode-<seed>-<id>.jsonl`.
    pub fn save_episode(&mut self) -> Result<(PathBuf, usize), TeleopError> {
        let traj = self.trajectory()?;
        let path = self.out_dir.join(format!("episode-{}-{}.jsonl", self.seed, traj.episode_id));
        let io = |source| TeleopError::Io { path: path.clone(), source };
        std::fs::create_dir_all(&self.out_dir).map_err(io)?;
        trajfile::write_file(std::slice::from_ref(&traj), &path).map_err(io)?;
        self.phase = Phase::Saved;
        Ok((path, traj.steps.len()))
    }
}

fn error(reason: String) -> ServerMessage {
    ServerMessage::Error { reason }
}

/// Feeds a recorded client script through a session. Each line is a client
/// message, except `{"type":"tick"}` which advances the clock; blank lines
/// are skipped. Returns every server message in order.
pub fn replay<R: BufRead>(session: &mut Session, script: R) -> std::io::Result<Vec<ServerMessage>> {
    let mut out = Vec::new();
    for line in script.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let is_tick = serde_json::from_str::<serde_json::Value>(line)
            .ok()
            .is_some_and(|v| v.get("type").and_then(|t| t.as_str()) == Some("tick"));
        if is_tick {
            out.extend(session.tick());
        } else {
            out.extend(session.handle_text(line));
        }
    }
    Ok(out)
}

/// Convenience wrapper over [`replay`] for a script file.
pub fn replay_file(session: &mut Session, path: &Path) -> std::io::Result<Vec<ServerMessage>> {
    replay(session, std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn started(sigma: [f64; 4]) -> (Session, tempfile::TempDir) {
        let dir = tempfile::tempdir().unwrap();
        let mut s = Session::new(dir.path(), DisturbanceLevel::new(sigma, 0).unwrap(), 3);
        let out = s.handle(ClientMessage::Start { config: None, sigma: None, seed: None });
        assert!(matches!(out[0], ServerMessage::Started { .. }));
        (s, dir)
    }

    #[test]
    fn switch_follows_cycle() {
        let (mut s, _d) = started([0.0; 4]);
        let out = s.handle(ClientMessage::SwitchMode { to: Some(1) });
        assert_eq!(out, vec![ServerMessage::Ack { of: "switch_mode".into(), mode: 1, applied: None }]);
        let out = s.handle(ClientMessage::SwitchMode { to: Some(3) });
        match &out[0] {
            ServerMessage::Nack { allowed, .. } => assert_eq!(allowed, &vec![1, 2]),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.mode(), Some(Mode::REACH));
    }

    #[test]
    fn nack_from_mode_zero_to_three() {
        let (mut s, _d) = started([0.0; 4]);
        match &s.handle(ClientMessage::SwitchMode { to: Some(3) })[0] {
            ServerMessage::Nack { allowed, .. } => assert_eq!(allowed, &vec![0, 1]),
            other => panic!("{other:?}"),
        }
        assert!(matches!(&s.handle(ClientMessage::SwitchMode { to: Some(9) })[0], ServerMessage::Nack { .. }));
    }

    #[test]
    fn auto_mode_overrides_human_action() {
        let (mut s, _d) = started([0.5; 4]);
        let out = s.handle(ClientMessage::Action { dx: 1.0, dy: 1.0, dz: 1.0, dtheta: 0.0 });
        assert_eq!(out, vec![ServerMessage::Ack { of: "action".into(), mode: 0, applied: Some(false) }]);
        s.tick();
        let step = &s.steps()[0];
        assert_eq!(step.action_executed, auto_action(Mode::RETURN).unwrap());
        assert_eq!(step.action_intended, step.action_executed);
    }

    #[test]
    fn zero_sigma_executes_intended() {
        let (mut s, _d) = started([0.0; 4]);
        s.handle(ClientMessage::SwitchMode { to: None });
        s.handle(ClientMessage::Action { dx: -1.0, dy: 0.5, dz: -2.0, dtheta: 0.0 });
        for _ in 0..5 {
            match &s.tick()[0] {
                ServerMessage::State { intended, executed, mode, .. } => {
                    assert_eq!(*mode, 1);
                    assert_eq!(intended, executed);
                    assert_eq!(*intended, [-1.0, 0.5, -2.0, 0.0]);
                }
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn disturbance_only_in_manual_modes() {
        let (mut s, _d) = started([1.0; 4]);
        s.handle(ClientMessage::Action { dx: 0.0, dy: 0.0, dz: 0.0, dtheta: 0.0 });
        s.tick();
        s.handle(ClientMessage::SwitchMode { to: Some(1) });
        s.tick();
        let steps = s.steps();
        assert_eq!(steps[0].action_executed, steps[0].action_intended);
        assert_ne!(steps[1].action_executed, steps[1].action_intended);
    }

    #[test]
    fn malformed_and_out_of_order_messages() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = Session::new(dir.path(), DisturbanceLevel::zero(0), 0);
        for text in ["not json", r#"{"type":"fly"}"#, r#"{"type":"action","dx":1}"#] {
            assert!(matches!(&s.handle_text(text)[0], ServerMessage::Error { .. }), "{text}");
        }
        assert!(matches!(&s.handle(ClientMessage::Save)[0], ServerMessage::Error { .. }));
        assert!(matches!(&s.handle(ClientMessage::SwitchMode { to: None })[0], ServerMessage::Error { .. }));
        assert!(s.tick().is_empty());
        let bad = ClientMessage::Start { config: None, sigma: Some([-1.0, 0.0, 0.0, 0.0]), seed: None };
        assert!(matches!(&s.handle(bad)[0], ServerMessage::Error { .. }));
        let bad = ClientMessage::Start {
            config: Some(SessionConfig { n_objects: 7, ..Default::default() }),
            sigma: None,
            seed: None,
        };
        assert!(matches!(&s.handle(bad)[0], ServerMessage::Error { .. }));
    }

    #[test]
    fn empty_episode_cannot_be_saved() {
        let (mut s, _d) = started([0.0; 4]);
        assert!(matches!(s.save_episode(), Err(TeleopError::EmptyEpisode)));
    }

    #[test]
    fn fifty_ticks_give_fifty_steps() {
        let (mut s, _d) = started([0.0; 4]);
        for _ in 0..50 {
            s.tick();
        }
        let (path, n) = s.save_episode().unwrap();
        assert_eq!(n, 50);
        let back = trajfile::read_file(&path).unwrap();
        assert_eq!(back, vec![s.trajectory().unwrap()]);
        assert_eq!(s.phase(), Phase::Saved);
    }
}
