//! Scripted operators standing in for the human at the master device.
//!
//! An operator sees only what reaches the master side: the feedback force
//! after the channel, the master handle and the reference it has commanded
//! itself. It never reads the replica state.

use crate::comms::ChannelSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScriptError {
    #[error("waypoint times must be strictly increasing (index {0})")]
    WaypointOrder(usize),
    #[error("impulse {0}: times must be increasing and durations positive")]
    Impulse(usize),
    #[error("non-finite value in script")]
    NonFinite,
    #[error("recorded ticks must be ordered")]
    RecordOrder,
}

/// One command from the operator side, applied at the next tick boundary.
/// This is also the payload of interactive "command" messages.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct OperatorOutput {
    /// Target displacement of the master handle (m).
    pub master_err: [f64; 2],
    /// Whether the hand is on the handle at all.
    pub master_held: bool,
    /// Gripper button: velocity mode while held.
    pub gripper_held: bool,
    /// Hammer force at the replica end-effector (N).
    pub external_impulse: [f64; 2],
    /// Keyboard nudge of the replica reference (m/s).
    pub pose_nudge: [f64; 2],
}

/// What the operator can see at the master side.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Observation {
    /// Feedback force as delivered by the channel (N).
    pub f_fb: [f64; 2],
    /// Replica reference as commanded on the master side, before the channel.
    pub x_desired: [f64; 2],
    /// Master handle displacement.
    pub master_pos: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t: f64,
    /// Master handle displacement to hold at `t` (m).
    pub target: [f64; 2],
    pub gripper_held: bool,
}

/// Half-sine hammer blow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpulseSpec {
    pub t: f64,
    /// Peak force vector (N).
    pub wrench: [f64; 2],
    pub duration: f64,
}

impl ImpulseSpec {
    pub fn force_at(&self, t: f64) -> [f64; 2] {
        let s = t - self.t;
        if s < 0.0 || s > self.duration {
            return [0.0, 0.0];
        }
        let shape = (PI * s / self.duration).sin();
        [self.wrench[0] * shape, self.wrench[1] * shape]
    }
}

/// Closed-loop task segments used by the object and button protocols.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum TaskStep {
    /// Drive the commanded reference to `target` in velocity mode.
    MoveTo { target: [f64; 2] },
    /// Rest with the handle centred and the gripper released.
    Dwell { duration: f64 },
    /// Push against the surface with outward `normal` until the observed
    /// feedback confirms the press.
    Press { normal: [f64; 2] },
    /// Back off until the observed feedback has vanished.
    Release { normal: [f64; 2] },
}

/// Gains and thresholds of the scripted operator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatorProfile {
    /// Feedback force aimed for while pressing (N).
    pub target_force: f64,
    /// Observed force that counts as a confirmed press (N) ...
    pub done_force: f64,
    /// ... when sustained this long (s).
    pub done_hold: f64,
    /// Handle push rate per newton of force error (m/(N s)).
    pub force_gain: f64,
    /// Deepest handle push (m).
    pub max_push: f64,
    /// Handle withdrawal speed when releasing (m/s).
    pub release_speed: f64,
    /// Observed force below which the release is complete (N).
    pub release_force: f64,
    /// Handle displacement per metre of reference error in velocity mode (1).
    pub move_gain: f64,
    /// Largest handle displacement in velocity mode (m).
    pub max_move: f64,
    /// Reference error that ends a move (m).
    pub move_tol: f64,
    /// Press attempts longer than this fail the task (s).
    pub press_timeout: f64,
}

impl OperatorProfile {
    /// Slow and delay-tolerant.
    pub fn conservative() -> Self {
        OperatorProfile {
            target_force: 8.0,
            done_force: 6.0,
            done_hold: 0.3,
            force_gain: 0.004,
            max_push: 0.15,
            release_speed: 0.05,
            release_force: 1.0,
            move_gain: 2.0,
            max_move: 0.05,
            move_tol: 5e-4,
            press_timeout: 60.0,
        }
    }

    /// Faster pushes and moves; less margin under delay.
    pub fn aggressive() -> Self {
        OperatorProfile {
            force_gain: 0.012,
            move_gain: 4.0,
            max_move: 0.08,
            done_hold: 0.15,
            ..Self::conservative()
        }
    }
}

impl Default for OperatorProfile {
    fn default() -> Self {
        Self::conservative()
    }
}

/// A command taking effect from a given tick on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecordedCommand {
    pub tick: u64,
    pub command: OperatorOutput,
}

/// Link conditions switched at a given tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecordedChannels {
    pub tick: u64,
    pub channels: ChannelSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OperatorScript {
    Idle,
    /// Open-loop handle trajectory, linearly interpolated.
    Waypoints {
        waypoints: Vec<Waypoint>,
    },
    /// Hammer blows on the replica. The operator keeps the master at rest
    /// with the clutch engaged, so the replica reference stays put.
    Impulses {
        impulse_spec: Vec<ImpulseSpec>,
    },
    ObjectTouch {
        steps: Vec<TaskStep>,
        #[serde(default)]
        profile: OperatorProfile,
    },
    ButtonPress {
        steps: Vec<TaskStep>,
        #[serde(default)]
        profile: OperatorProfile,
    },
    /// Replays a command stream captured from a live session, including any
    /// link-condition switches made during it.
    Recorded {
        commands: Vec<RecordedCommand>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        channel_changes: Vec<RecordedChannels>,
    },
}

impl OperatorScript {
    pub fn validate(&self) -> Result<(), ScriptError> {
        match self {
            OperatorScript::Waypoints { waypoints } => {
                for (i, w) in waypoints.iter().enumerate() {
                    if !(w.t.is_finite() && w.target.iter().all(|v| v.is_finite())) {
                        return Err(ScriptError::NonFinite);
                    }
                    if i > 0 && w.t <= waypoints[i - 1].t {
                        return Err(ScriptError::WaypointOrder(i));
                    }
                }
            }
            OperatorScript::Impulses { impulse_spec } => {
                for (i, imp) in impulse_spec.iter().enumerate() {
                    let ordered = i == 0 || imp.t > impulse_spec[i - 1].t;
                    if !(ordered && imp.duration > 0.0 && imp.t.is_finite()) {
                        return Err(ScriptError::Impulse(i));
                    }
                }
            }
            OperatorScript::Recorded {
                commands,
                channel_changes,
            } if (commands.windows(2).any(|w| w[1].tick < w[0].tick)
                || channel_changes.windows(2).any(|w| w[1].tick <= w[0].tick)) =>
            {
                return Err(ScriptError::RecordOrder);
            }
            _ => {}
        }
        Ok(())
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            OperatorScript::Idle => "idle",
            OperatorScript::Waypoints { .. } => "waypoints",
            OperatorScript::Impulses { .. } => "impulses",
            OperatorScript::ObjectTouch { .. } => "object_touch",
            OperatorScript::ButtonPress { .. } => "button_press",
            OperatorScript::Recorded { .. } => "recorded",
        }
    }
}

/// Number of hammer blows in the impulse protocol.
pub const IMPULSE_COUNT: usize = 14;
pub const IMPULSE_PEAK: f64 = 20.0;
pub const IMPULSE_DURATION: f64 = 0.01;
/// Spacing between blows (s).
pub const IMPULSE_SPACING: f64 = 3.0;
/// Time of the first blow (s).
pub const IMPULSE_START: f64 = 1.0;

/// Fourteen half-sine blows in seeded random directions.
pub fn impulse_protocol(seed: u64) -> OperatorScript {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let impulse_spec = (0..IMPULSE_COUNT)
        .map(|i| {
            let angle: f64 = rng.random_range(0.0..2.0 * PI);
            ImpulseSpec {
                t: IMPULSE_START + IMPULSE_SPACING * i as f64,
                wrench: [IMPULSE_PEAK * angle.cos(), IMPULSE_PEAK * angle.sin()],
                duration: IMPULSE_DURATION,
            }
        })
        .collect();
    OperatorScript::Impulses { impulse_spec }
}

/// Height above a surface at which moves between targets happen (m).
pub const HOVER_HEIGHT: f64 = 0.03;
/// Reference offset above the surface before pushing (m).
pub const PRESS_STANDOFF: f64 = 0.002;
const SETTLE_TIME: f64 = 0.5;

fn press_sequence(surface: [f64; 2], normal: [f64; 2]) -> Vec<TaskStep> {
    let at = |h: f64| [surface[0] + normal[0] * h, surface[1] + normal[1] * h];
    vec![
        TaskStep::MoveTo {
            target: at(HOVER_HEIGHT),
        },
        TaskStep::MoveTo {
            target: at(PRESS_STANDOFF),
        },
        TaskStep::Dwell {
            duration: SETTLE_TIME,
        },
        TaskStep::Press { normal },
        TaskStep::Release { normal },
        TaskStep::MoveTo {
            target: at(HOVER_HEIGHT),
        },
    ]
}

/// Press two buttons whose caps face up (+y), one after the other.
pub fn button_press_protocol(
    button_tops: [[f64; 2]; 2],
    profile: OperatorProfile,
) -> OperatorScript {
    let up = [0.0, 1.0];
    let mut steps = press_sequence(button_tops[0], up);
    steps.extend(press_sequence(button_tops[1], up));
    OperatorScript::ButtonPress { steps, profile }
}

/// Approach a surface point along `normal`, press, release and back off.
pub fn object_touch_protocol(
    surface: [f64; 2],
    normal: [f64; 2],
    profile: OperatorProfile,
) -> OperatorScript {
    OperatorScript::ObjectTouch {
        steps: press_sequence(surface, normal),
        profile,
    }
}

/// Progress of a closed-loop script.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskStatus {
    Running,
    Done,
    Failed,
}

/// Stateful driver of a script.
#[derive(Debug, Clone)]
pub struct Operator {
    script: OperatorScript,
    tick: u64,
    step: usize,
    step_start: Option<f64>,
    push: f64,
    hold_since: Option<f64>,
    status: TaskStatus,
    live: OperatorOutput,
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn clamp_norm(v: [f64; 2], max: f64) -> [f64; 2] {
    let n = v[0].hypot(v[1]);
    if n > max {
        [v[0] * max / n, v[1] * max / n]
    } else {
        v
    }
}

impl Operator {
    pub fn new(script: OperatorScript) -> Self {
        let status = match script {
            OperatorScript::ObjectTouch { .. } | OperatorScript::ButtonPress { .. } => {
                TaskStatus::Running
            }
            _ => TaskStatus::Done,
        };
        Operator {
            script,
            tick: 0,
            step: 0,
            step_start: None,
            push: 0.0,
            hold_since: None,
            status,
            live: OperatorOutput::default(),
        }
    }

    pub fn script(&self) -> &OperatorScript {
        &self.script
    }

    pub fn status(&self) -> TaskStatus {
        self.status
    }

    /// Index of the current closed-loop step.
    pub fn step_index(&self) -> usize {
        self.step
    }

    /// Replaces the command used by live sessions (ignored by scripts).
    pub fn set_live_command(&mut self, cmd: OperatorOutput) {
        self.live = cmd;
    }

    pub fn live_command(&self) -> OperatorOutput {
        self.live
    }

    /// One operator update at time `t`.
    pub fn step(&mut self, obs: &Observation, t: f64, dt: f64) -> OperatorOutput {
        let tick = self.tick;
        self.tick += 1;
        match &self.script {
            OperatorScript::Idle => self.live,
            OperatorScript::Waypoints { waypoints } => waypoint_output(waypoints, t),
            OperatorScript::Impulses { impulse_spec } => {
                let mut f = [0.0, 0.0];
                for imp in impulse_spec {
                    let g = imp.force_at(t);
                    f[0] += g[0];
                    f[1] += g[1];
                }
                OperatorOutput {
                    external_impulse: f,
                    master_held: true,
                    gripper_held: true,
                    ..OperatorOutput::default()
                }
            }
            OperatorScript::Recorded { commands, .. } => {
                let idx = commands.partition_point(|c| c.tick <= tick);
                if idx == 0 {
                    OperatorOutput::default()
                } else {
                    commands[idx - 1].command
                }
            }
            OperatorScript::ObjectTouch { steps, profile }
            | OperatorScript::ButtonPress { steps, profile } => {
                let (steps, profile) = (steps.clone(), *profile);
                self.task_step(&steps, &profile, obs, t, dt)
            }
        }
    }

    fn advance(&mut self) {
        self.step += 1;
        self.step_start = None;
        self.hold_since = None;
        self.push = 0.0;
    }

    fn task_step(
        &mut self,
        steps: &[TaskStep],
        prof: &OperatorProfile,
        obs: &Observation,
        t: f64,
        dt: f64,
    ) -> OperatorOutput {
        let idle = OperatorOutput {
            master_held: true,
            ..OperatorOutput::default()
        };
        if self.status != TaskStatus::Running {
            return idle;
        }
        let Some(step) = steps.get(self.step).copied() else {
            self.status = TaskStatus::Done;
            return idle;
        };
        let start = *self.step_start.get_or_insert(t);
        match step {
            TaskStep::MoveTo { target } => {
                let err = [target[0] - obs.x_desired[0], target[1] - obs.x_desired[1]];
                if err[0].hypot(err[1]) < prof.move_tol {
                    self.advance();
                    return idle;
                }
                let cmd = clamp_norm(
                    [err[0] * prof.move_gain, err[1] * prof.move_gain],
                    prof.max_move,
                );
                OperatorOutput {
                    master_err: cmd,
                    master_held: true,
                    gripper_held: true,
                    ..OperatorOutput::default()
                }
            }
            TaskStep::Dwell { duration } => {
                if t - start >= duration {
                    self.advance();
                }
                idle
            }
            TaskStep::Press { normal } => {
                if t - start > prof.press_timeout {
                    self.status = TaskStatus::Failed;
                    return idle;
                }
                let seen = dot(obs.f_fb, normal);
                self.push = (self.push + prof.force_gain * (prof.target_force - seen) * dt)
                    .clamp(0.0, prof.max_push);
                let out = OperatorOutput {
                    master_err: [-normal[0] * self.push, -normal[1] * self.push],
                    master_held: true,
                    ..OperatorOutput::default()
                };
                if seen >= prof.done_force {
                    let since = *self.hold_since.get_or_insert(t);
                    if t - since >= prof.done_hold {
                        // Keep pushing from the same depth while releasing.
                        let depth = self.push;
                        self.advance();
                        self.push = depth;
                    }
                } else {
                    self.hold_since = None;
                }
                out
            }
            TaskStep::Release { normal } => {
                self.push = (self.push - prof.release_speed * dt).max(0.0);
                let seen = dot(obs.f_fb, normal);
                let out = OperatorOutput {
                    master_err: [-normal[0] * self.push, -normal[1] * self.push],
                    master_held: true,
                    ..OperatorOutput::default()
                };
                if self.push == 0.0 && seen < prof.release_force {
                    let since = *self.hold_since.get_or_insert(t);
                    if t - since >= 0.2 {
                        self.advance();
                    }
                } else {
                    self.hold_since = None;
                }
                out
            }
        }
    }
}

fn waypoint_output(waypoints: &[Waypoint], t: f64) -> OperatorOutput {
    let Some(first) = waypoints.first() else {
        return OperatorOutput::default();
    };
    if t < first.t {
        return OperatorOutput::default();
    }
    let k = waypoints.partition_point(|w| w.t <= t);
    let a = &waypoints[k - 1];
    let target = match waypoints.get(k) {
        Some(b) => {
            let s = (t - a.t) / (b.t - a.t);
            [
                a.target[0] + s * (b.target[0] - a.target[0]),
                a.target[1] + s * (b.target[1] - a.target[1]),
            ]
        }
        None => a.target,
    };
    OperatorOutput {
        master_err: target,
        master_held: true,
        gripper_held: a.gripper_held,
        ..OperatorOutput::default()
    }
}
