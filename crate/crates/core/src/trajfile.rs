//! Line-delimited trajectory files.
//!
//! ```text
//! {"kind":"dipa-trajectories","version":1}
//! {"kind":"episode","episode_id":0,"iteration":1,"seed":..,"method":"partial_automation","sigma":[..]}
//! {"kind":"step","t":0,"state_full":[..],"action_intended":[..],"action_executed":[..],"mode":0}
//! ...
//! {"kind":"end","terminal":{..},"success":true}
//! ```
//!
//! One step per line so a live session can append as it goes. Floats are
//! written in shortest round-trip form.

use crate::types::{ActionDelta, EnvSummary, Mode, Regime, Step, Trajectory, ACTION_DIM};
use serde::{Deserialize, Serialize};
use std::io::{self, BufRead, Write};
use std::path::Path;

pub const FORMAT_TAG: &str = "dipa-trajectories";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum TrajFileError {
    #[error("line {line}: field `{field}`: {message}")]
    Parse { line: usize, field: String, message: String },
    #[error("line {line}: {message}")]
    Structure { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileHeader {
    version: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeRecord {
    episode_id: u32,
    iteration: u32,
    seed: u64,
    method: Regime,
    sigma: [f64; ACTION_DIM],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepRecord {
    t: usize,
    state_full: Vec<f64>,
    action_intended: [f64; ACTION_DIM],
    action_executed: [f64; ACTION_DIM],
    mode: Option<Mode>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EndRecord {
    terminal: EnvSummary,
    success: bool,
}

#[derive(Serialize)]
struct Tagged<'a, T> {
    kind: &'a str,
    #[serde(flatten)]
    body: T,
}

/// Incremental writer; also used by the teleoperation server.
pub struct TrajectoryWriter<W: Write> {
    out: W,
    bytes: usize,
}

impl<W: Write> TrajectoryWriter<W> {
    pub fn new(mut out: W) -> io::Result<Self> {
        let mut bytes = 0;
        bytes += write_line(&mut out, &Tagged { kind: FORMAT_TAG, body: FileHeader { version: FORMAT_VERSION } })?;
        Ok(Self { out, bytes })
    }

    pub fn begin_episode(&mut self, episode_id: u32, iteration: u32, seed: u64, regime: Regime, sigma: [f64; ACTION_DIM]) -> io::Result<()> {
        let rec = EpisodeRecord { episode_id, iteration, seed, method: regime, sigma };
        self.bytes += write_line(&mut self.out, &Tagged { kind: "episode", body: rec })?;
        Ok(())
    }

    pub fn step(&mut self, step: &Step) -> io::Result<()> {
        let rec = StepRecord {
            t: step.t,
            state_full: step.state_full.clone(),
            action_intended: step.action_intended.to_array(),
            action_executed: step.action_executed.to_array(),
            mode: step.mode,
        };
        self.bytes += write_line(&mut self.out, &Tagged { kind: "step", body: rec })?;
        Ok(())
    }

    pub fn end_episode(&mut self, terminal: &EnvSummary, success: bool) -> io::Result<()> {
        let rec = EndRecord { terminal: terminal.clone(), success };
        self.bytes += write_line(&mut self.out, &Tagged { kind: "end", body: rec })?;
        Ok(())
    }

    pub fn trajectory(&mut self, t: &Trajectory) -> io::Result<()> {
        self.begin_episode(t.episode_id, t.iteration_k, t.seed, t.regime, t.sigma)?;
        for s in &t.steps {
            self.step(s)?;
        }
        self.end_episode(&t.terminal, t.success)
    }

    pub fn bytes_written(&self) -> usize {
        self.bytes
    }

    pub fn into_inner(mut self) -> io::Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

fn write_line<W: Write, T: Serialize>(out: &mut W, value: &T) -> io::Result<usize> {
    let mut buf = serde_json::to_vec(value).map_err(io::Error::other)?;
    buf.push(b'\n');
    out.write_all(&buf)?;
    Ok(buf.len())
}

/// Writes every trajectory and returns the number of bytes written.
pub fn write_trajectories<W: Write>(trajectories: &[Trajectory], sink: W) -> io::Result<usize> {
    let mut w = TrajectoryWriter::new(sink)?;
    for t in trajectories {
        w.trajectory(t)?;
    }
    let n = w.bytes_written();
    w.into_inner()?;
    Ok(n)
}

pub fn write_file(trajectories: &[Trajectory], path: &Path) -> io::Result<usize> {
    let f = std::fs::File::create(path)?;
    write_trajectories(trajectories, io::BufWriter::new(f))
}

fn decode<T: for<'de> Deserialize<'de>>(value: serde_json::Value, line: usize) -> Result<T, TrajFileError> {
    serde_path_to_error::deserialize(value).map_err(|e| TrajFileError::Parse {
        line,
        field: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

struct Partial {
    header: EpisodeRecord,
    steps: Vec<Step>,
}

pub fn read_trajectories<R: BufRead>(source: R) -> Result<Vec<Trajectory>, TrajFileError> {
    let mut out = Vec::new();
    let mut current: Option<Partial> = None;
    let mut saw_header = false;
    let mut expected_dim: Option<usize> = None;

    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut value: serde_json::Value = serde_json::from_str(&line).map_err(|e| TrajFileError::Parse {
            line: line_no,
            field: ".".into(),
            message: e.to_string(),
        })?;
        let kind = value
            .as_object_mut()
            .and_then(|o| o.remove("kind"))
            .and_then(|k| k.as_str().map(str::to_owned))
            .ok_or_else(|| TrajFileError::Parse { line: line_no, field: "kind".into(), message: "missing record kind".into() })?;
        let structure = |message: &str| TrajFileError::Structure { line: line_no, message: message.to_owned() };

        if !saw_header {
            if kind != FORMAT_TAG {
                return Err(structure("first record must be the file header"));
            }
            let h: FileHeader = decode(value, line_no)?;
            if h.version != FORMAT_VERSION {
                return Err(TrajFileError::Parse {
                    line: line_no,
                    field: "version".into(),
                    message: format!("unsupported version {}", h.version),
                });
            }
            saw_header = true;
            continue;
        }

        match kind.as_str() {
            "episode" => {
                if current.is_some() {
                    return Err(structure("episode started before previous one ended"));
                }
                current = Some(Partial { header: decode(value, line_no)?, steps: Vec::new() });
            }
            "step" => {
                let p = current.as_mut().ok_or_else(|| structure("step outside an episode"))?;
                let r: StepRecord = decode(value, line_no)?;
                if let Some(dim) = expected_dim {
                    if r.state_full.len() != dim {
                        return Err(TrajFileError::Parse {
                            line: line_no,
                            field: "state_full".into(),
                            message: format!("length {} differs from {dim}", r.state_full.len()),
                        });
                    }
                }
                expected_dim = Some(r.state_full.len());
                p.steps.push(Step {
                    t: r.t,
                    state_full: r.state_full,
                    action_intended: ActionDelta::from_array(r.action_intended),
                    action_executed: ActionDelta::from_array(r.action_executed),
                    mode: r.mode,
                    episode_id: p.header.episode_id,
                    iteration_k: p.header.iteration,
                });
            }
            "end" => {
                let p = current.take().ok_or_else(|| structure("end outside an episode"))?;
                let r: EndRecord = decode(value, line_no)?;
                out.push(Trajectory {
                    episode_id: p.header.episode_id,
                    iteration_k: p.header.iteration,
                    seed: p.header.seed,
                    regime: p.header.method,
                    sigma: p.header.sigma,
                    steps: p.steps,
                    terminal: r.terminal,
                    success: r.success,
                });
            }
            FORMAT_TAG => return Err(structure("duplicate file header")),
            other => {
                return Err(TrajFileError::Parse {
                    line: line_no,
                    field: "kind".into(),
                    message: format!("unknown record kind `{other}`"),
                })
            }
        }
    }
    if !saw_header {
        return Err(TrajFileError::Structure { line: 0, message: "empty file".into() });
    }
    if current.is_some() {
        return Err(TrajFileError::Structure { line: 0, message: "file ends inside an episode".into() });
    }
    Ok(out)
}

pub fn read_file(path: &Path) -> Result<Vec<Trajectory>, TrajFileError> {
    let f = std::fs::File::open(path)?;
    read_trajectories(io::BufReader::new(f))
}
