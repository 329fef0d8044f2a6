//! Interactive session: a [`Simulation`] advanced one tick at a time under
//! operator commands, producing versioned snapshots and cue events.
//!
//! A session is transport-agnostic. Messages serialize to single-line JSON
//! objects carrying a `v` field and a `type` tag; the CLI `serve` command
//! exchanges them over a WebSocket at `/session`.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::geom::{Point3, RigidTransform};
use crate::guidance::{FeedbackState, Phase, SteeringCommand};
use crate::pipeline::{FrameResult, PipelineError, SimConfig, Simulation};

/// Wire protocol version carried in every message.
pub const PROTOCOL_VERSION: u32 = 1;

/// Configuration sections `set_param` may change.
pub const TUNABLE_SECTIONS: [&str; 2] = ["blob", "noise"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SessionError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("advance must be a finite non-negative distance, got {0}")]
    InvalidAdvance(f64),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("rejected value for {key}: {reason}")]
    InvalidParam { key: String, reason: String },
    #[error("unsupported protocol version {0}")]
    Version(u32),
    #[error("malformed message: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OperatorCommand {
    SelectLesion { id: String },
    /// Button held (`true`) or released.
    AlignHold { on: bool },
    AdvanceNeedle { mm: f64 },
    SetPhase { phase: Phase },
    /// Dotted key inside [`TUNABLE_SECTIONS`], e.g. `noise.sigma_px`.
    SetParam { key: String, value: Value },
    /// Restart from the initial configuration; `None` keeps the current seed.
    Reset {
        #[serde(default)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelledMarker {
    pub id: String,
    pub position: Point3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceSnapshot {
    /// Estimated device pose, absent when fewer than three device markers were labelled.
    pub pose: Option<RigidTransform>,
    pub tip: Option<Point3>,
    pub theta1_deg: f64,
    pub theta2_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub reconstructed: usize,
    pub match_residual: f64,
    pub registration_residual: Option<f64>,
    pub frames_since_valid: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub tick: u64,
    pub time_s: f64,
    pub phase: Phase,
    pub align_hold: bool,
    pub markers: Vec<LabelledMarker>,
    pub lesion: Option<Point3>,
    /// Ground truth, present only in debug sessions.
    pub true_lesion: Option<Point3>,
    pub device: DeviceSnapshot,
    pub command: Option<SteeringCommand>,
    pub feedback: Option<FeedbackState>,
    pub alignment_error_deg: Option<f64>,
    pub remaining_mm: Option<f64>,
    pub health: Health,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    /// The needle came into alignment while the button was held.
    Aligned { tick: u64, error_deg: f64 },
    /// The tip entered the proximity-tone range.
    Proximity { tick: u64, distance_mm: f64, freq_hz: f64 },
    Reached { tick: u64, distance_mm: f64 },
}

/// Everything a server sends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Snapshot(Snapshot),
    Event(Event),
    Ack { command: String },
    Error { message: String },
    /// Snapshots `from_tick..=to_tick` were dropped for a slow reader.
    Dropped { from_tick: u64, to_tick: u64 },
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    v: u32,
    #[serde(flatten)]
    body: T,
}

impl ServerMessage {
    /// One line of JSON without the trailing newline.
    pub fn to_line(&self) -> String {
        serde_json::to_string(&Envelope {
            v: PROTOCOL_VERSION,
            body: self,
        })
        .expect("server messages serialize")
    }

    pub fn from_line(line: &str) -> Result<Self, SessionError> {
        let env: Envelope<Self> = serde_json::from_str(line).map_err(|e| SessionError::Malformed(e.to_string()))?;
        if env.v != PROTOCOL_VERSION {
            return Err(SessionError::Version(env.v));
        }
        Ok(env.body)
    }
}

impl OperatorCommand {
    pub fn to_line(&self) -> String {
        serde_json::to_string(&Envelope {
            v: PROTOCOL_VERSION,
            body: self,
        })
        .expect("commands serialize")
    }

    pub fn from_line(line: &str) -> Result<Self, SessionError> {
        let raw: Value = serde_json::from_str(line).map_err(|e| SessionError::Malformed(e.to_string()))?;
        match raw.get("v").and_then(Value::as_u64) {
            Some(v) if v == u64::from(PROTOCOL_VERSION) => {}
            Some(v) => return Err(SessionError::Version(v as u32)),
            None => return Err(SessionError::Malformed("missing protocol version `v`".into())),
        }
        let env: Envelope<Self> = serde_json::from_value(raw).map_err(|e| SessionError::Malformed(e.to_string()))?;
        Ok(env.body)
    }

    pub fn kind(&self) -> &'static str {
        match self {
            OperatorCommand::SelectLesion { .. } => "select_lesion",
            OperatorCommand::AlignHold { .. } => "align_hold",
            OperatorCommand::AdvanceNeedle { .. } => "advance_needle",
            OperatorCommand::SetPhase { .. } => "set_phase",
            OperatorCommand::SetParam { .. } => "set_param",
            OperatorCommand::Reset { .. } => "reset",
        }
    }
}

/// A command together with the tick it was applied before.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedCommand {
    pub tick: u64,
    pub command: OperatorCommand,
}

pub struct Session {
    initial: SimConfig,
    sim: Simulation,
    debug: bool,
    was_aligned: bool,
    was_near: bool,
    was_reached: bool,
    log: Vec<LoggedCommand>,
}

impl Session {
    pub fn new(cfg: SimConfig, seed: u64, debug: bool) -> Result<Self, SessionError> {
        let sim = Simulation::new(cfg.clone(), seed)?;
        Ok(Self {
            initial: cfg,
            sim,
            debug,
            was_aligned: false,
            was_near: false,
            was_reached: false,
            log: Vec::new(),
        })
    }

    pub fn simulation(&self) -> &Simulation {
        &self.sim
    }

    pub fn debug(&self) -> bool {
        self.debug
    }

    /// Tick of the next snapshot.
    pub fn next_tick(&self) -> u64 {
        self.sim.tick()
    }

    pub fn command_log(&self) -> &[LoggedCommand] {
        &self.log
    }

    /// Apply `cmd` before the next tick. Rejected commands leave the session
    /// unchanged and are not logged.
    pub fn apply(&mut self, cmd: OperatorCommand) -> Result<(), SessionError> {
        let tick = self.sim.tick();
        match &cmd {
            OperatorCommand::SelectLesion { id } => self.sim.select_lesion(id)?,
            OperatorCommand::AlignHold { on } => self.sim.set_align_hold(*on),
            OperatorCommand::AdvanceNeedle { mm } => {
                if !(mm.is_finite() && *mm >= 0.0) {
                    return Err(SessionError::InvalidAdvance(*mm));
                }
                self.sim.advance(*mm)?;
            }
            OperatorCommand::SetPhase { phase } => self.sim.set_phase(*phase),
            OperatorCommand::SetParam { key, value } => {
                let cfg = with_param(self.sim.config(), key, value)?;
                *self.sim.config_mut() = cfg;
            }
            OperatorCommand::Reset { seed } => {
                let seed = seed.unwrap_or(self.sim.seed());
                self.sim = Simulation::new(self.initial.clone(), seed)?;
                self.was_aligned = false;
                self.was_near = false;
                self.was_reached = false;
            }
        }
        self.log.push(LoggedCommand { tick, command: cmd });
        Ok(())
    }

    /// Advance one tick.
    pub fn tick(&mut self) -> (Snapshot, Vec<Event>) {
        let frame = self.sim.step();
        let events = self.events(&frame);
        (self.snapshot(&frame), events)
    }

    fn events(&mut self, f: &FrameResult) -> Vec<Event> {
        let mut out = Vec::new();
        let Some(fb) = f.feedback else {
            return out;
        };
        let aligned = self.sim.align_hold() && fb.aligned;
        if aligned && !self.was_aligned {
            out.push(Event::Aligned {
                tick: f.tick,
                error_deg: f.alignment_error_deg.unwrap_or(0.0),
            });
        }
        self.was_aligned = aligned;
        let near = fb.distance_mm < self.sim.config().feedback.d_max_mm;
        if near && !self.was_near {
            out.push(Event::Proximity {
                tick: f.tick,
                distance_mm: fb.distance_mm,
                freq_hz: fb.freq_hz,
            });
        }
        self.was_near = near;
        let reached = fb.reached || f.reached_signal;
        if reached && !self.was_reached {
            out.push(Event::Reached {
                tick: f.tick,
                distance_mm: fb.distance_mm,
            });
        }
        self.was_reached = reached;
        out
    }

    fn snapshot(&self, f: &FrameResult) -> Snapshot {
        let model = &self.sim.phantom().model;
        let lesion = match self.sim.config().guide_with {
            crate::register::TransformKind::Tps => f.lesion_tps,
            crate::register::TransformKind::Rigid => f.lesion_rigid,
        };
        Snapshot {
            tick: f.tick,
            time_s: f.time_s,
            phase: f.phase,
            align_hold: self.sim.align_hold(),
            markers: f
                .breast_markers
                .iter()
                .map(|(m, p)| LabelledMarker {
                    id: model.markers[*m].id.clone(),
                    position: *p,
                })
                .collect(),
            lesion: lesion.map(|l| l.position),
            true_lesion: self.debug.then_some(f.true_lesion),
            device: DeviceSnapshot {
                pose: f.device_pose,
                tip: f.tip_estimate,
                theta1_deg: f.gear_deg.0,
                theta2_deg: f.gear_deg.1,
            },
            command: f.command,
            feedback: f.feedback,
            alignment_error_deg: f.alignment_error_deg,
            remaining_mm: f.remaining_mm,
            health: Health {
                reconstructed: f.reconstructed,
                match_residual: f.match_residual,
                registration_residual: f.registration_residual,
                frames_since_valid: f.frames_since_valid,
            },
        }
    }
}

/// Copy of `cfg` with the dotted `key` replaced by `value`.
pub fn with_param(cfg: &SimConfig, key: &str, value: &Value) -> Result<SimConfig, SessionError> {
    let mut path = key.split('.');
    let section = path.next().unwrap_or_default();
    if !TUNABLE_SECTIONS.contains(&section) {
        return Err(SessionError::UnknownParam(key.to_string()));
    }
    let mut doc = serde_json::to_value(cfg).expect("config serializes");
    let mut slot = doc.get_mut(section).ok_or_else(|| SessionError::UnknownParam(key.to_string()))?;
    for part in path {
        slot = match slot {
            Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            other => other.get_mut(part),
        }
        .ok_or_else(|| SessionError::UnknownParam(key.to_string()))?;
    }
    if slot.is_object() {
        return Err(SessionError::UnknownParam(key.to_string()));
    }
    *slot = value.clone();
    let invalid = |reason: String| SessionError::InvalidParam {
        key: key.to_string(),
        reason,
    };
    let next: SimConfig = serde_json::from_value(doc).map_err(|e| invalid(e.to_string()))?;
    next.validate().map_err(|e| invalid(e.to_string()))?;
    Ok(next)
}

/// Re-run a recorded command log from a fresh session and collect the first
/// `ticks` snapshots.
pub fn replay(
    cfg: SimConfig,
    seed: u64,
    debug: bool,
    log: &[LoggedCommand],
    ticks: u64,
) -> Result<Vec<Snapshot>, SessionError> {
    let mut session = Session::new(cfg, seed, debug)?;
    let mut pending = log.iter().peekable();
    let mut out = Vec::with_capacity(ticks as usize);
    for _ in 0..ticks {
        // Resets rewind the tick counter, so commands are matched by log order.
        while let Some(entry) = pending.peek() {
            if entry.tick != session.next_tick() {
                break;
            }
            session.apply(entry.command.clone())?;
            pending.next();
        }
        out.push(session.tick().0);
    }
    Ok(out)
}
