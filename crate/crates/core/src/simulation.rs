//! Fixed-step co-simulation of operator, master device, channels, replica
//! controller, arm dynamics and contacts on one clock.
//!
//! [`Simulation::step`] is the single stepping path; the batch driver
//! ([`run`]) and the live service both call it.

use crate::comms::{Channel, ChannelError};
use crate::controllers::{
    master_wrench, replica_torque_fic, replica_torque_ic, velocity_mode_update, virtual_force,
    ControlError, FicFrame, IcParams, MasterParams, NullSpaceParams, ReplicaOutput, ReplicaParams,
    TeleopCommand,
};
use crate::dynamics::{DynamicsError, JointState, ManipulatorModel};
use crate::environment::{
    contact_wrench, estop_pair, ButtonEvent, ButtonLatch, ContactError, ContactObject, Surface,
};
use crate::experiment_log::{ExperimentLog, LogError, LogWriter, Row, EVENTS_COLUMN};
use crate::fic::{AxisErrorState, AxisFicState, FicParams};
use crate::operator::{
    button_press_protocol, impulse_protocol, object_touch_protocol, Observation, Operator,
    OperatorOutput, OperatorProfile, OperatorScript, ScriptError, TaskStatus,
};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("simulation aborted at t = {t} s: {reason}")]
    Abort {
        t: f64,
        reason: String,
        /// Log up to and including the offending tick.
        partial: Box<ExperimentLog>,
    },
    #[error(transparent)]
    Log(#[from] LogError),
}

impl From<ControlError> for SimError {
    fn from(e: ControlError) -> Self {
        SimError::Config(e.to_string())
    }
}
impl From<ChannelError> for SimError {
    fn from(e: ChannelError) -> Self {
        SimError::Config(e.to_string())
    }
}
impl From<ContactError> for SimError {
    fn from(e: ContactError) -> Self {
        SimError::Config(e.to_string())
    }
}
impl From<ScriptError> for SimError {
    fn from(e: ScriptError) -> Self {
        SimError::Config(e.to_string())
    }
}
impl From<DynamicsError> for SimError {
    fn from(e: DynamicsError) -> Self {
        SimError::Config(e.to_string())
    }
}

pub use crate::comms::ChannelSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Fic,
    Ic,
}

fn default_log_every() -> usize {
    10
}
fn default_rate_gain() -> f64 {
    1.0
}
fn default_ic_factor() -> f64 {
    8.0
}
fn default_done_tail() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub duration: f64,
    pub controller: ControllerKind,
    pub channels: ChannelSet,
    pub scenario: OperatorScript,
    pub model: ManipulatorModel,
    pub initial_q: Vec<f64>,
    pub master: MasterParams,
    pub replica: ReplicaParams,
    /// Baseline gains; derived from `replica` when absent.
    #[serde(default)]
    pub ic: Option<IcParams>,
    /// IC damping as a multiple of the FIC damping when `ic` is absent.
    #[serde(default = "default_ic_factor")]
    pub ic_damping_factor: f64,
    /// Velocity-mode gain (1/s).
    #[serde(default = "default_rate_gain")]
    pub rate_gain: f64,
    #[serde(default)]
    pub objects: Vec<ContactObject>,
    pub seed: u64,
    /// Write every n-th tick to the log.
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// End the run this long after a closed-loop script finishes.
    #[serde(default)]
    pub stop_when_done: bool,
    #[serde(default = "default_done_tail")]
    pub done_tail: f64,
}

/// Posture of the default two-link arm; the end-effector sits near (0.50, 0.30).
pub const HOME_Q: [f64; 2] = [-0.4, 1.9];

impl SimConfig {
    /// Two-link arm at rest, identity channels, no scenario.
    pub fn nominal() -> Self {
        let model = ManipulatorModel::planar_2link();
        let replica_fic = FicParams::calibrate(20.0, 0.1, 200.0, 2.0).expect("valid defaults");
        let master_fic = FicParams::calibrate(5.0, 0.08, 30.0, 4.0).expect("valid defaults");
        let dt = 1e-4;
        SimConfig {
            dt,
            duration: 5.0,
            controller: ControllerKind::Fic,
            channels: ChannelSet::uniform(0.0, 1.0 / dt),
            scenario: OperatorScript::Idle,
            model,
            initial_q: HOME_Q.to_vec(),
            master: MasterParams {
                fic: vec![master_fic; 2],
                k_a: 1.0,
                mass: 0.5,
                hand_stiffness: 2000.0,
                hand_damping: 40.0,
                vel_epsilon: crate::fic::DEFAULT_VEL_EPSILON,
            },
            replica: ReplicaParams {
                fic: vec![replica_fic; 2],
                k_c: 100.0,
                null: NullSpaceParams {
                    k_null: 5.0,
                    d_null: 0.5,
                    q_ref: None,
                },
                vel_epsilon: crate::fic::DEFAULT_VEL_EPSILON,
                frame: FicFrame::Principal,
            },
            ic: None,
            ic_damping_factor: 8.0,
            rate_gain: 1.0,
            objects: Vec::new(),
            seed: 0,
            log_every: 10,
            stop_when_done: false,
            done_tail: 1.0,
        }
    }

    /// Hammer-blow experiment on the replica.
    pub fn impulse_task(controller: ControllerKind, seed: u64) -> Self {
        let mut c = Self::nominal();
        c.controller = controller;
        c.seed = seed;
        c.scenario = impulse_protocol(seed);
        c.duration = crate::operator::IMPULSE_START
            + crate::operator::IMPULSE_SPACING * crate::operator::IMPULSE_COUNT as f64;
        c
    }

    /// Two E-stop buttons below the home pose, pressed in turn.
    pub fn button_task(delay: f64, sample_rate: f64, profile: OperatorProfile) -> Self {
        let mut c = Self::nominal();
        let home = c
            .model
            .forward_kinematics(&DVector::from_row_slice(&HOME_Q));
        let first_x = home[0] - 0.05;
        let top = home[1] - 0.10;
        c.objects = estop_pair(first_x, top).to_vec();
        c.scenario = button_press_protocol([[first_x, top], [first_x + 0.10, top]], profile);
        c.channels = ChannelSet::uniform(delay, sample_rate);
        c.duration = 200.0;
        c.stop_when_done = true;
        c.log_every = 50;
        c
    }

    /// Press on a flat object below the home pose and let go again.
    pub fn touch_task(object: ContactObject, profile: OperatorProfile) -> Result<Self, SimError> {
        let Surface::HalfPlane { point, normal } = object.surface else {
            return Err(SimError::Config(
                "touch task needs a half-plane object".into(),
            ));
        };
        let mut c = Self::nominal();
        let home = c
            .model
            .forward_kinematics(&DVector::from_row_slice(&HOME_Q));
        let len = normal[0].hypot(normal[1]);
        let n = [normal[0] / len, normal[1] / len];
        let h = (home[0] - point[0]) * n[0] + (home[1] - point[1]) * n[1];
        let below = [home[0] - h * n[0], home[1] - h * n[1]];
        c.scenario = object_touch_protocol(below, n, profile);
        c.objects = vec![object];
        c.duration = 60.0;
        c.stop_when_done = true;
        c.log_every = 50;
        Ok(c)
    }

    pub fn ic_params(&self) -> IcParams {
        self.ic
            .clone()
            .unwrap_or_else(|| IcParams::matching(&self.replica, self.ic_damping_factor))
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if !(self.dt > 0.0 && self.dt <= 1e-2) {
            return bad("dt must lie in (0, 0.01]");
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad("duration must be positive");
        }
        if self.log_every == 0 {
            return bad("log_every must be >= 1");
        }
        if !(self.rate_gain.is_finite() && self.rate_gain >= 0.0) {
            return bad("rate_gain must be >= 0");
        }
        self.model.validate_for_control()?;
        if self.initial_q.len() != self.model.dof() {
            return bad("initial_q length must equal the number of joints");
        }
        self.master.validate(2)?;
        self.replica.validate(&self.model)?;
        if self.controller == ControllerKind::Ic {
            self.ic_params().validate(&self.model)?;
        }
        for c in [self.channels.f_fb, self.channels.f_v, self.channels.x_d] {
            c.validate()?;
        }
        for o in &self.objects {
            o.validate()?;
        }
        self.scenario.validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, SimError> {
        serde_json::from_str(s).map_err(|e| SimError::Config(e.to_string()))
    }
}

/// Live view of the simulation for the UI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub t: f64,
    pub tick: u64,
    pub q: Vec<f64>,
    /// Base, joints and end-effector.
    pub links: Vec<[f64; 2]>,
    pub ee: Vec<f64>,
    pub x_desired_master: Vec<f64>,
    pub x_desired_replica: Vec<f64>,
    pub master_pos: [f64; 2],
    pub f_fb_replica: [f64; 2],
    pub f_fb_master: [f64; 2],
    pub buttons: Vec<bool>,
    pub gripper_held: bool,
    pub channels: ChannelSet,
}

/// Button or task event with its exact time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub t: f64,
    pub text: String,
}

/// Stiffness force, damping force, error and pose of the previous tick.
type PortSample = (Vec<f64>, Vec<f64>, Vec<f64>, DVector<f64>);

pub struct Simulation {
    cfg: SimConfig,
    ic: IcParams,
    tick: u64,
    joint: JointState,
    q_ref: DVector<f64>,
    master_pos: DVector<f64>,
    master_vel: DVector<f64>,
    master_fic: Vec<AxisFicState>,
    replica_fic: Vec<AxisFicState>,
    x_d_master: DVector<f64>,
    ch_fv: Channel<DVector<f64>>,
    ch_xd: Channel<DVector<f64>>,
    /// Current link conditions; `cfg.channels` keeps the initial ones.
    channels: ChannelSet,
    ch_ffb: Channel<DVector<f64>>,
    ffb_received: DVector<f64>,
    ffb_measured: DVector<f64>,
    x_d_received: DVector<f64>,
    latches: Vec<ButtonLatch>,
    operator: Operator,
    last_command: OperatorOutput,
    pending_events: Vec<String>,
    events: Vec<SimEvent>,
    prev_port: Option<PortSample>,
    work_in: f64,
    work_out: f64,
    log: LogWriter,
    done_at: Option<f64>,
}

fn pad(v: [f64; 2], n: usize) -> DVector<f64> {
    let mut out = DVector::zeros(n);
    out[0] = v[0];
    out[1] = v[1];
    out
}

fn first2(v: &DVector<f64>) -> [f64; 2] {
    [v[0], v[1]]
}

impl Simulation {
    pub fn new(cfg: SimConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let n_task = cfg.model.task_dim();
        let q0 = DVector::from_vec(cfg.initial_q.clone());
        let joint = JointState::at_rest(q0.clone());
        let q_ref = cfg
            .replica
            .null
            .q_ref
            .clone()
            .map(DVector::from_vec)
            .unwrap_or_else(|| q0.clone());
        let pose0 = cfg.model.forward_kinematics(&q0);
        let ch_fv = Channel::new(cfg.channels.f_v, cfg.dt, DVector::zeros(n_task))?;
        let ch_xd = Channel::new(cfg.channels.x_d, cfg.dt, pose0.clone())?;
        let ch_ffb = Channel::new(cfg.channels.f_fb, cfg.dt, DVector::zeros(2))?;
        let latches = vec![ButtonLatch::default(); cfg.objects.len()];
        let operator = Operator::new(cfg.scenario.clone());
        let ic = cfg.ic_params();
        Ok(Simulation {
            ic,
            tick: 0,
            joint,
            q_ref,
            master_pos: DVector::zeros(2),
            master_vel: DVector::zeros(2),
            master_fic: vec![AxisFicState::default(); 2],
            replica_fic: vec![AxisFicState::default(); n_task],
            x_d_master: pose0.clone(),
            ch_fv,
            ch_xd,
            channels: cfg.channels,
            ch_ffb,
            ffb_received: DVector::zeros(2),
            ffb_measured: DVector::zeros(2),
            x_d_received: pose0,
            latches,
            operator,
            last_command: OperatorOutput::default(),
            pending_events: Vec::new(),
            events: Vec::new(),
            prev_port: None,
            work_in: 0.0,
            work_out: 0.0,
            log: LogWriter::default(),
            done_at: None,
            cfg,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 * self.cfg.dt
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn joint_state(&self) -> &JointState {
        &self.joint
    }

    pub fn events(&self) -> &[SimEvent] {
        &self.events
    }

    pub fn task_status(&self) -> TaskStatus {
        self.operator.status()
    }

    /// Mutable access for live sessions and perturbation tests.
    pub fn operator_mut(&mut self) -> &mut Operator {
        &mut self.operator
    }

    /// Overwrites the replica joint state (used to inject disturbances).
    pub fn set_joint_state(&mut self, js: JointState) {
        self.joint = js;
    }

    /// The command the operator produced on the last tick.
    pub fn last_command(&self) -> OperatorOutput {
        self.last_command
    }

    pub fn channels(&self) -> ChannelSet {
        self.channels
    }

    /// Changes every stream's link condition at the next tick.
    pub fn set_channels(&mut self, channels: ChannelSet) -> Result<(), SimError> {
        self.ch_ffb.reconfigure(channels.f_fb)?;
        self.ch_fv.reconfigure(channels.f_v)?;
        self.ch_xd.reconfigure(channels.x_d)?;
        self.channels = channels;
        Ok(())
    }

    /// True once the configured duration has elapsed or a finished script's
    /// tail has run out.
    pub fn finished(&self) -> bool {
        let t = self.time();
        if t >= self.cfg.duration - 0.5 * self.cfg.dt {
            return true;
        }
        self.cfg.stop_when_done && matches!(self.done_at, Some(d) if t >= d + self.cfg.done_tail)
    }

    pub fn snapshot(&self) -> Snapshot {
        let pose = self.cfg.model.forward_kinematics(&self.joint.q);
        let mut links = vec![[0.0, 0.0]];
        links.extend(self.cfg.model.joint_positions(&self.joint.q));
        Snapshot {
            t: self.time(),
            tick: self.tick,
            q: self.joint.q.iter().copied().collect(),
            links,
            ee: pose.iter().copied().collect(),
            x_desired_master: self.x_d_master.iter().copied().collect(),
            x_desired_replica: self.x_d_received.iter().copied().collect(),
            master_pos: first2(&self.master_pos),
            f_fb_replica: first2(&self.ffb_measured),
            f_fb_master: first2(&self.ffb_received),
            buttons: self
                .cfg
                .objects
                .iter()
                .zip(&self.latches)
                .filter(|(o, _)| o.button.is_some())
                .map(|(_, l)| l.active)
                .collect(),
            gripper_held: self.last_command.gripper_held,
            channels: self.channels,
        }
    }

    fn replica_control(&mut self, f_v: &DVector<f64>) -> Result<ReplicaOutput, SimError> {
        let out = match self.cfg.controller {
            ControllerKind::Fic => {
                let (out, next) = replica_torque_fic(
                    &self.cfg.replica,
                    &self.cfg.model,
                    &self.joint,
                    &self.x_d_received,
                    f_v,
                    &self.q_ref,
                    &self.replica_fic,
                )?;
                self.replica_fic = next;
                out
            }
            ControllerKind::Ic => replica_torque_ic(
                &self.ic,
                &self.cfg.model,
                &self.joint,
                &self.x_d_received,
                f_v,
                &self.q_ref,
            )?,
        };
        Ok(out)
    }

    /// Work bookkeeping of the replica controller at sim rate. The stiffness
    /// part acts between the reference and the end-effector, the damping part
    /// against the end-effector velocity alone.
    fn account_work(&mut self, out: &ReplicaOutput) {
        let fs: Vec<f64> = out.stiffness_force.iter().copied().collect();
        let fd: Vec<f64> = out.damping_force.iter().copied().collect();
        let err: Vec<f64> = out.err.iter().copied().collect();
        if let Some((pfs, pfd, perr, ppose)) = &self.prev_port {
            let mut w = 0.0;
            for i in 0..fs.len() {
                w += 0.5 * (pfs[i] + fs[i]) * -(err[i] - perr[i]);
                w += 0.5 * (pfd[i] + fd[i]) * (out.pose[i] - ppose[i]);
            }
            if w >= 0.0 {
                self.work_out += w;
            } else {
                self.work_in -= w;
            }
        }
        self.prev_port = Some((fs, fd, err, out.pose.clone()));
    }

    /// Advances one tick. Returns whether a log row was written.
    pub fn step(&mut self) -> Result<bool, SimError> {
        let t = self.time();
        let dt = self.cfg.dt;
        let n_task = self.cfg.model.task_dim();

        // Operator sees last tick's delivered feedback and master-side state.
        let obs = Observation {
            f_fb: first2(&self.ffb_received),
            x_desired: first2(&self.x_d_master),
            master_pos: first2(&self.master_pos),
        };
        if let OperatorScript::Recorded {
            channel_changes, ..
        } = self.operator.script()
        {
            if let Some(c) = channel_changes
                .iter()
                .find(|c| c.tick == self.tick)
                .map(|c| c.channels)
            {
                self.set_channels(c)?;
            }
        }
        let status_before = self.operator.status();
        let cmd = self.operator.step(&obs, t, dt);
        self.last_command = cmd;

        // Master device.
        let m_err: Vec<AxisErrorState> = (0..2)
            .map(|i| AxisErrorState::new(-self.master_pos[i], -self.master_vel[i]))
            .collect();
        let (wm, next_mfic) = master_wrench(
            &self.cfg.master,
            &m_err,
            &self.master_fic,
            &self.ffb_received,
        );
        self.master_fic = next_mfic;
        let hand = if cmd.master_held {
            let target = DVector::from_row_slice(&cmd.master_err);
            (target - &self.master_pos) * self.cfg.master.hand_stiffness
                - &self.master_vel * self.cfg.master.hand_damping
        } else {
            DVector::zeros(2)
        };
        let acc = (&wm.total + &hand) / self.cfg.master.mass;
        self.master_vel += acc * dt;
        self.master_pos += &self.master_vel * dt;

        // Master-side command shaping.
        let tc = TeleopCommand {
            master_err: pad(first2(&self.master_pos), n_task),
            gripper_held: cmd.gripper_held,
            x_desired: self.x_d_master.clone(),
        };
        let mut x_d = velocity_mode_update(&tc, self.cfg.rate_gain, dt).x_desired;
        x_d += pad(cmd.pose_nudge, n_task) * dt;
        self.x_d_master = x_d;
        let f_v_pre = if cmd.gripper_held {
            DVector::zeros(n_task)
        } else {
            virtual_force(self.cfg.replica.k_c, &tc.master_err)
        };

        // Network, master to replica.
        let f_v = self.ch_fv.step(f_v_pre.clone(), t);
        self.x_d_received = self.ch_xd.step(self.x_d_master.clone(), t);

        // Replica controller.
        let out = match self.replica_control(&f_v) {
            Ok(out) => out,
            Err(e) => return Err(self.abort(t, e.to_string())),
        };
        self.account_work(&out);
        let tau = self.cfg.model.limit_torque(out.tau.clone());

        // Environment.
        let ee = first2(&out.pose);
        let ee_vel = first2(&out.vel);
        let mut contact = [0.0, 0.0];
        let mut edges = Vec::new();
        for (i, obj) in self.cfg.objects.iter().enumerate() {
            let r = contact_wrench(obj, ee, ee_vel);
            contact[0] += r.wrench[0];
            contact[1] += r.wrench[1];
            if let Some(spec) = &obj.button {
                if let Some(ev) = self.latches[i].update(spec, r.normal_force, t) {
                    let tag = match ev {
                        ButtonEvent::Activated => "on",
                        ButtonEvent::Deactivated => "off",
                    };
                    edges.push(format!("{}:{tag}", obj.id));
                }
            }
        }
        for e in edges {
            self.record_event(t, e);
        }
        let measured = [
            contact[0] + cmd.external_impulse[0],
            contact[1] + cmd.external_impulse[1],
        ];
        let ext = pad(measured, n_task);

        let log_row = self.tick.is_multiple_of(self.cfg.log_every as u64);
        if log_row {
            self.write_row(
                t, &cmd, &wm.total, &f_v_pre, &f_v, &out, &tau, contact, measured,
            )?;
        }

        // Dynamics.
        let next = self.cfg.model.integrate_step(&self.joint, &tau, &ext, dt);
        let next = match next {
            Ok(n) => n,
            Err(e) => return Err(self.abort(t, e.to_string())),
        };
        self.joint = next;

        // Network, replica to master.
        self.ffb_measured = DVector::from_row_slice(&measured);
        self.ffb_received = self.ch_ffb.step(self.ffb_measured.clone(), t);

        if !self.state_is_finite() {
            return Err(self.abort(t, "non-finite state".into()));
        }
        if self.done_at.is_none()
            && status_before == TaskStatus::Running
            && self.operator.status() != TaskStatus::Running
        {
            let verdict = if self.operator.status() == TaskStatus::Failed {
                "task:failed"
            } else {
                "task:done"
            };
            self.record_event(t, verdict.into());
            self.done_at = Some(t);
        }
        self.tick += 1;
        Ok(log_row)
    }

    fn record_event(&mut self, t: f64, text: String) {
        self.pending_events.push(format!("{text}@{t}"));
        self.events.push(SimEvent { t, text });
    }

    fn state_is_finite(&self) -> bool {
        self.joint
            .q
            .iter()
            .chain(self.joint.qd.iter())
            .all(|v| v.is_finite())
            && self
                .master_pos
                .iter()
                .chain(self.master_vel.iter())
                .all(|v| v.is_finite())
    }

    fn abort(&mut self, t: f64, reason: String) -> SimError {
        let log = std::mem::take(&mut self.log);
        let partial = log
            .finish(&self.cfg.to_json())
            .unwrap_or_else(|_| LogWriter::default().finish("{}").expect("empty log"));
        SimError::Abort {
            t,
            reason,
            partial: Box::new(partial),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn write_row(
        &mut self,
        t: f64,
        cmd: &OperatorOutput,
        wm: &DVector<f64>,
        f_v_pre: &DVector<f64>,
        f_v: &DVector<f64>,
        out: &ReplicaOutput,
        tau: &DVector<f64>,
        contact: [f64; 2],
        measured: [f64; 2],
    ) -> Result<(), SimError> {
        let mut r = Row::default();
        r.num("t", t)
            .nums("q", self.joint.q.iter())
            .nums("qd", self.joint.qd.iter())
            .nums("x", out.pose.iter())
            .nums("v", out.vel.iter())
            .nums("xd_master", self.x_d_master.iter())
            .nums("xd_replica", self.x_d_received.iter())
            .nums("master_pos", self.master_pos.iter())
            .nums("master_vel", self.master_vel.iter())
            .nums("hand", cmd.master_err.iter())
            .flag("master_held", cmd.master_held)
            .flag("gripper_held", cmd.gripper_held)
            .nums("wm", wm.iter())
            .nums("fv_pre", f_v_pre.iter())
            .nums("fv_post", f_v.iter())
            .nums("ffb_pre", self.ffb_measured.iter())
            .nums("ffb_post", self.ffb_received.iter())
            .nums("impulse", cmd.external_impulse.iter())
            .nums("contact", contact.iter())
            .nums("f_ext", measured.iter())
            .nums("err", out.err.iter())
            .nums("f_stiff", out.stiffness_force.iter())
            .nums("f_damp", out.damping_force.iter())
            .nums("f_ctrl", out.task_force.iter())
            .nums("h", out.h.iter())
            .nums("tau", tau.iter());
        for (i, a) in out.axes.iter().enumerate() {
            r.num(format!("phase_{i}"), a.phase.as_index() as f64);
        }
        if self.cfg.controller == ControllerKind::Fic {
            r.nums("x_max", self.replica_fic.iter().map(|s| &s.x_max_err))
                .nums("stored", self.replica_fic.iter().map(|s| &s.stored_energy));
        }
        r.num("work_in", self.work_in)
            .num("work_out", self.work_out);
        let buttons = self
            .cfg
            .objects
            .iter()
            .zip(&self.latches)
            .filter(|(o, _)| o.button.is_some());
        for (i, (_, l)) in buttons.enumerate() {
            r.flag(format!("button_{i}"), l.active);
        }
        r.num("op_step", self.operator.step_index() as f64)
            .flag("singular", out.singular);
        let events = self.pending_events.join(";");
        r.text(EVENTS_COLUMN, &events);
        self.pending_events.clear();
        self.work_in = 0.0;
        self.work_out = 0.0;
        self.log.push(r)?;
        Ok(())
    }

    /// Finishes the log. The header carries `config` (which may differ from
    /// the running configuration, e.g. a live session exporting its
    /// recorded command stream as the scenario).
    pub fn finish_with(self, config: &SimConfig) -> Result<ExperimentLog, SimError> {
        Ok(self.log.finish(&config.to_json())?)
    }

    pub fn finish(self) -> Result<ExperimentLog, SimError> {
        let json = self.cfg.to_json();
        Ok(self.log.finish(&json)?)
    }
}

/// Batch driver: runs a configuration to completion.
pub fn run(config: &SimConfig) -> Result<ExperimentLog, SimError> {
    let mut sim = Simulation::new(config.clone())?;
    while !sim.finished() {
        sim.step()?;
    }
    sim.finish()
}

/// Independent runs in parallel; one failure does not affect the others.
pub fn run_grid(configs: &[SimConfig]) -> Vec<Result<ExperimentLog, SimError>> {
    configs.par_iter().map(run).collect()
}

/// The 3 x 3 grid of link conditions around a base configuration.
pub fn condition_grid(base: &SimConfig, delays: &[f64], rates: &[f64]) -> Vec<SimConfig> {
    let mut out = Vec::with_capacity(delays.len() * rates.len());
    for &rate in rates {
        for &delay in delays {
            let mut c = base.clone();
            c.channels = ChannelSet::uniform(delay, rate);
            out.push(c);
        }
    }
    out
}

/// Reference grid: 1 kHz, 100 Hz, 10 Hz by 0, 0.5, 1 s.
pub const GRID_RATES: [f64; 3] = [1000.0, 100.0, 10.0];
pub const GRID_DELAYS: [f64; 3] = [0.0, 0.5, 1.0];

/// Re-runs the configuration stored in a log and compares bytes.
pub fn replay(log_bytes: &[u8]) -> Result<bool, SimError> {
    let json = crate::experiment_log::config_line(log_bytes)?;
    let cfg = SimConfig::from_json(json)?;
    let fresh = run(&cfg)?;
    Ok(fresh.to_bytes() == log_bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nominal_config_round_trips_through_json() {
        let c = SimConfig::button_task(0.5, 100.0, OperatorProfile::conservative());
        let back = SimConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = SimConfig::nominal();
        c.dt = 0.0;
        assert!(Simulation::new(c).is_err());
        let mut c = SimConfig::nominal();
        c.initial_q = vec![0.0];
        assert!(Simulation::new(c).is_err());
        let mut c = SimConfig::nominal();
        c.channels.f_fb.sample_rate = -1.0;
        assert!(Simulation::new(c).is_err());
    }

    #[test]
    fn equilibrium_is_held() {
        let mut c = SimConfig::nominal();
        c.duration = 1.0;
        let mut sim = Simulation::new(c).unwrap();
        let q0 = sim.joint_state().q.clone();
        while !sim.finished() {
            sim.step().unwrap();
            assert!(sim.joint_state().qd.norm() < 1e-9);
        }
        assert!((&sim.joint_state().q - q0).norm() < 1e-9);
        assert_eq!(sim.tick(), 10_000);
    }
}
