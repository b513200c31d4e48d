//! Master wrench law, replica torque laws (FIC and constant-stiffness
//! baseline) and the operator-side command shaping.

use crate::dynamics::{DynamicsError, JointState, ManipulatorModel, TaskTerms};
use crate::fic::{fic_wrench, AxisErrorState, AxisFicState, FicOutput, FicParams, Phase};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("{what}: expected {expected} axes, got {got}")]
    Axes {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{0} must be finite and non-negative")]
    Gain(&'static str),
    #[error("{0} must be finite and positive")]
    Positive(&'static str),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

fn non_negative(name: &'static str, v: f64) -> Result<(), ControlError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(ControlError::Gain(name))
    }
}

fn positive(name: &'static str, v: f64) -> Result<(), ControlError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(ControlError::Positive(name))
    }
}

fn axes(what: &'static str, expected: usize, got: usize) -> Result<(), ControlError> {
    if expected == got {
        Ok(())
    } else {
        Err(ControlError::Axes {
            what,
            expected,
            got,
        })
    }
}

/// Simulated haptic device: a point mass per axis centred by an FIC
/// workspace spring, pushed by the scaled feedback force and by the hand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasterParams {
    pub fic: Vec<FicParams>,
    pub k_a: f64,
    /// Moving mass per axis (kg).
    pub mass: f64,
    /// Hand grip stiffness toward the operator's target displacement (N/m).
    pub hand_stiffness: f64,
    pub hand_damping: f64,
    #[serde(default = "default_vel_epsilon")]
    pub vel_epsilon: f64,
}

fn default_vel_epsilon() -> f64 {
    crate::fic::DEFAULT_VEL_EPSILON
}

impl MasterParams {
    pub fn validate(&self, axes_expected: usize) -> Result<(), ControlError> {
        axes("master fic", axes_expected, self.fic.len())?;
        non_negative("k_a", self.k_a)?;
        positive("master mass", self.mass)?;
        non_negative("hand_stiffness", self.hand_stiffness)?;
        non_negative("hand_damping", self.hand_damping)?;
        positive("vel_epsilon", self.vel_epsilon)
    }
}

/// Wrench applied by the master device to its handle.
#[derive(Debug, Clone, PartialEq)]
pub struct MasterWrench {
    pub total: DVector<f64>,
    pub workspace: Vec<FicOutput>,
    pub feedback: DVector<f64>,
}

/// `W_M = FIC_SHE(x_M, xd_M) + k_a F_FB`. `master_state[i]` holds the
/// workspace error `-x_M` and its rate.
pub fn master_wrench(
    p: &MasterParams,
    master_state: &[AxisErrorState],
    fic_states: &[AxisFicState],
    f_fb: &DVector<f64>,
) -> (MasterWrench, Vec<AxisFicState>) {
    let mut outputs = Vec::with_capacity(p.fic.len());
    let mut next = Vec::with_capacity(p.fic.len());
    for ((e, s), fp) in master_state.iter().zip(fic_states).zip(&p.fic) {
        let (o, n) = fic_wrench(*e, s, fp, p.vel_epsilon);
        outputs.push(o);
        next.push(n);
    }
    let feedback = f_fb * p.k_a;
    let total = DVector::from_iterator(outputs.len(), outputs.iter().map(|o| o.force)) + &feedback;
    (
        MasterWrench {
            total,
            workspace: outputs,
            feedback,
        },
        next,
    )
}

/// Force the master exerts on the replica in position mode: `k_c x_M`.
pub fn virtual_force(k_c: f64, master_err: &DVector<f64>) -> DVector<f64> {
    master_err * k_c
}

/// What the master side sends toward the replica.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeleopCommand {
    pub master_err: DVector<f64>,
    pub gripper_held: bool,
    pub x_desired: DVector<f64>,
}

/// Velocity mode: while the gripper is held, the master displacement
/// integrates into the replica reference.
pub fn velocity_mode_update(cmd: &TeleopCommand, rate_gain: f64, dt: f64) -> TeleopCommand {
    let mut next = cmd.clone();
    if cmd.gripper_held {
        next.x_desired += &cmd.master_err * (rate_gain * dt);
    }
    next
}

/// Joint-space posture regulation projected into the null space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullSpaceParams {
    pub k_null: f64,
    pub d_null: f64,
    /// Reference posture; `None` means "the posture the run starts in".
    #[serde(default)]
    pub q_ref: Option<Vec<f64>>,
}

impl NullSpaceParams {
    pub fn validate(&self, dof: usize) -> Result<(), ControlError> {
        non_negative("k_null", self.k_null)?;
        non_negative("d_null", self.d_null)?;
        if let Some(q) = &self.q_ref {
            axes("q_ref", dof, q.len())?;
        }
        Ok(())
    }
}

/// Axes along which the FIC phase machines run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FicFrame {
    /// World task axes.
    Cartesian,
    /// Principal axes of the task-space inertia at the reference posture.
    /// Inertial coupling between the phase machines vanishes there.
    #[default]
    Principal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaParams {
    pub fic: Vec<FicParams>,
    pub k_c: f64,
    #[serde(flatten)]
    pub null: NullSpaceParams,
    #[serde(default = "default_vel_epsilon")]
    pub vel_epsilon: f64,
    #[serde(default)]
    pub frame: FicFrame,
}

impl ReplicaParams {
    pub fn validate(&self, model: &ManipulatorModel) -> Result<(), ControlError> {
        axes("replica fic", model.task_dim(), self.fic.len())?;
        non_negative("k_c", self.k_c)?;
        positive("vel_epsilon", self.vel_epsilon)?;
        if self.frame == FicFrame::Principal && self.fic.windows(2).any(|w| w[0] != w[1]) {
            return Err(ControlError::Gain(
                "principal-axis FIC needs identical parameters on every axis",
            ));
        }
        self.null.validate(model.dof())
    }
}

/// Orthonormal basis whose columns are the principal axes of the task-space
/// inertia at `q_ref`. Each column is matched to the world axis it is closest
/// to and signed to point along it, so a diagonal inertia gives the identity.
pub fn principal_frame(
    model: &ManipulatorModel,
    q_ref: &DVector<f64>,
) -> Result<DMatrix<f64>, ControlError> {
    let n = model.task_dim();
    let terms = model.task_terms(q_ref, &DVector::zeros(model.dof()))?;
    let eig = nalgebra::SymmetricEigen::new(terms.lambda);
    let mut frame = DMatrix::zeros(n, n);
    let mut free: Vec<usize> = (0..n).collect();
    for axis in 0..n {
        let (slot, &col) = free
            .iter()
            .enumerate()
            .max_by(|a, b| {
                eig.eigenvectors[(axis, *a.1)]
                    .abs()
                    .total_cmp(&eig.eigenvectors[(axis, *b.1)].abs())
            })
            .expect("one eigenvector per axis");
        let v = eig.eigenvectors.column(col);
        let sign = if v[axis] < 0.0 { -1.0 } else { 1.0 };
        frame.set_column(axis, &(v * sign));
        free.remove(slot);
    }
    Ok(frame)
}

/// Constant-stiffness impedance baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcParams {
    pub k: Vec<f64>,
    pub d: Vec<f64>,
    #[serde(flatten)]
    pub null: NullSpaceParams,
}

impl IcParams {
    /// Baseline sharing the FIC constant stiffness `k_0`, with the FIC
    /// damping multiplied by `damping_factor`.
    pub fn matching(replica: &ReplicaParams, damping_factor: f64) -> Self {
        IcParams {
            k: replica.fic.iter().map(|p| p.k_0()).collect(),
            d: replica.fic.iter().map(|p| p.d() * damping_factor).collect(),
            null: replica.null.clone(),
        }
    }

    pub fn validate(&self, model: &ManipulatorModel) -> Result<(), ControlError> {
        axes("ic stiffness", model.task_dim(), self.k.len())?;
        axes("ic damping", model.task_dim(), self.d.len())?;
        for &k in &self.k {
            positive("ic k", k)?;
        }
        for &d in &self.d {
            positive("ic d", d)?;
        }
        self.null.validate(model.dof())
    }
}

/// Per-axis task controller output.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AxisControl {
    pub err: f64,
    pub vel: f64,
    pub stiffness_force: f64,
    pub damping_force: f64,
    pub phase: Phase,
}

/// Replica torque together with the terms it was built from.
#[derive(Debug, Clone)]
pub struct ReplicaOutput {
    pub tau: DVector<f64>,
    pub axes: Vec<AxisControl>,
    /// Controller wrench (stiffness plus damping), without `f_v` and `h`.
    pub task_force: DVector<f64>,
    /// World-frame error, stiffness and damping forces. `axes` holds the
    /// same quantities in the controller's own frame.
    pub err: DVector<f64>,
    pub stiffness_force: DVector<f64>,
    pub damping_force: DVector<f64>,
    pub h: DVector<f64>,
    pub tau_null: DVector<f64>,
    pub gravity: DVector<f64>,
    pub pose: DVector<f64>,
    pub vel: DVector<f64>,
    pub singular: bool,
}

/// Task error with the reference treated as piecewise constant, so the
/// error rate is minus the end-effector velocity.
fn task_errors(terms: &TaskTerms, x_desired: &DVector<f64>) -> Vec<AxisErrorState> {
    (0..terms.pose.len())
        .map(|i| AxisErrorState::new(x_desired[i] - terms.pose[i], -terms.vel[i]))
        .collect()
}

fn null_torque(null: &NullSpaceParams, q_ref: &DVector<f64>, state: &JointState) -> DVector<f64> {
    (q_ref - &state.q) * null.k_null - &state.qd * null.d_null
}

/// Shared tail of both replica laws:
/// `tau = J^T (f_v + F_ctrl + h) + N^T tau_null + g`.
fn assemble(
    terms: TaskTerms,
    frame: Option<&DMatrix<f64>>,
    axes: Vec<AxisControl>,
    f_v: &DVector<f64>,
    null: &NullSpaceParams,
    q_ref: &DVector<f64>,
    state: &JointState,
) -> ReplicaOutput {
    let world = |f: fn(&AxisControl) -> f64| {
        let v = DVector::from_iterator(axes.len(), axes.iter().map(f));
        match frame {
            Some(r) => r * v,
            None => v,
        }
    };
    let err = world(|a| a.err);
    let stiffness_force = world(|a| a.stiffness_force);
    let damping_force = world(|a| a.damping_force);
    let task_force = &stiffness_force + &damping_force;
    let wrench = f_v + &task_force + &terms.h;
    let tau_null = &terms.null_projector_t * null_torque(null, q_ref, state);
    let gravity = terms.dynamics.g.clone();
    let tau = terms.j.transpose() * wrench + &tau_null + &gravity;
    ReplicaOutput {
        tau,
        axes,
        task_force,
        err,
        stiffness_force,
        damping_force,
        h: terms.h,
        tau_null,
        gravity,
        pose: terms.pose,
        vel: terms.vel,
        singular: terms.damped,
    }
}

fn check_inputs(
    model: &ManipulatorModel,
    state: &JointState,
    x_desired: &DVector<f64>,
    f_v: &DVector<f64>,
    q_ref: &DVector<f64>,
) -> Result<(), ControlError> {
    axes("x_desired", model.task_dim(), x_desired.len())?;
    axes("f_v", model.task_dim(), f_v.len())?;
    axes("q_ref", model.dof(), q_ref.len())?;
    axes("q", model.dof(), state.q.len())?;
    axes("qd", model.dof(), state.qd.len())
}

/// FIC replica law. `f_v` is the virtual force as received from the master.
pub fn replica_torque_fic(
    p: &ReplicaParams,
    model: &ManipulatorModel,
    state: &JointState,
    x_desired: &DVector<f64>,
    f_v: &DVector<f64>,
    q_ref: &DVector<f64>,
    fic_states: &[AxisFicState],
) -> Result<(ReplicaOutput, Vec<AxisFicState>), ControlError> {
    check_inputs(model, state, x_desired, f_v, q_ref)?;
    axes("fic states", model.task_dim(), fic_states.len())?;
    let terms = model.task_terms(&state.q, &state.qd)?;
    let frame = match p.frame {
        FicFrame::Cartesian => None,
        FicFrame::Principal => Some(principal_frame(model, q_ref)?),
    };
    let mut errors = task_errors(&terms, x_desired);
    if let Some(r) = &frame {
        let e = r.transpose() * DVector::from_iterator(errors.len(), errors.iter().map(|e| e.err));
        let v = r.transpose() * DVector::from_iterator(errors.len(), errors.iter().map(|e| e.vel));
        errors = (0..e.len())
            .map(|i| AxisErrorState::new(e[i], v[i]))
            .collect();
    }
    let mut next = Vec::with_capacity(fic_states.len());
    let mut controls = Vec::with_capacity(fic_states.len());
    for ((e, s), fp) in errors.into_iter().zip(fic_states).zip(&p.fic) {
        let (o, n) = fic_wrench(e, s, fp, p.vel_epsilon);
        controls.push(AxisControl {
            err: e.err,
            vel: e.vel,
            stiffness_force: o.stiffness_force,
            damping_force: o.damping_force,
            phase: o.phase,
        });
        next.push(n);
    }
    Ok((
        assemble(terms, frame.as_ref(), controls, f_v, &p.null, q_ref, state),
        next,
    ))
}

/// Constant-stiffness baseline with the same structure as the FIC law.
pub fn replica_torque_ic(
    p: &IcParams,
    model: &ManipulatorModel,
    state: &JointState,
    x_desired: &DVector<f64>,
    f_v: &DVector<f64>,
    q_ref: &DVector<f64>,
) -> Result<ReplicaOutput, ControlError> {
    check_inputs(model, state, x_desired, f_v, q_ref)?;
    let terms = model.task_terms(&state.q, &state.qd)?;
    let controls = task_errors(&terms, x_desired)
        .into_iter()
        .enumerate()
        .map(|(i, e)| AxisControl {
            err: e.err,
            vel: e.vel,
            stiffness_force: p.k[i] * e.err,
            damping_force: p.d[i] * e.vel,
            phase: Phase::Divergence,
        })
        .collect();
    Ok(assemble(terms, None, controls, f_v, &p.null, q_ref, state))
}

/// `J M^-1 N^T tau`: end-effector acceleration caused by a null-space torque.
pub fn null_space_leakage(terms: &TaskTerms, tau: &DVector<f64>) -> DVector<f64> {
    &terms.j * &terms.m_inv * (&terms.null_projector_t * tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fic::FicParams;

    fn replica_params(model: &ManipulatorModel) -> ReplicaParams {
        ReplicaParams {
            fic: vec![FicParams::calibrate(20.0, 0.1, 100.0, 2.0).unwrap(); model.task_dim()],
            k_c: 100.0,
            null: NullSpaceParams {
                k_null: 5.0,
                d_null: 0.5,
                q_ref: None,
            },
            vel_epsilon: 1e-4,
            frame: FicFrame::Cartesian,
        }
    }

    #[test]
    fn principal_frame_is_orthonormal_and_diagonalises_inertia() {
        let model = ManipulatorModel::planar_2link();
        let q = DVector::from_row_slice(&[-0.4, 1.9]);
        let r = principal_frame(&model, &q).unwrap();
        assert!((r.transpose() * &r - DMatrix::identity(2, 2)).norm() < 1e-12);
        let lambda = model.task_terms(&q, &DVector::zeros(2)).unwrap().lambda;
        let d = r.transpose() * lambda * &r;
        assert!(d[(0, 1)].abs() < 1e-9 * d.norm());
        assert!(r[(0, 0)] > 0.0 && r[(1, 1)] > 0.0);
    }

    #[test]
    fn principal_frame_preserves_port_power() {
        let model = ManipulatorModel::planar_2link();
        let mut p = replica_params(&model);
        p.frame = FicFrame::Principal;
        let q_ref = DVector::from_row_slice(&[-0.4, 1.9]);
        let state = JointState {
            q: DVector::from_row_slice(&[-0.35, 1.85]),
            qd: DVector::from_row_slice(&[0.3, -0.2]),
        };
        let x_d = model.forward_kinematics(&q_ref);
        let states = vec![AxisFicState::default(); 2];
        let (out, _) = replica_torque_fic(
            &p,
            &model,
            &state,
            &x_d,
            &DVector::zeros(2),
            &q_ref,
            &states,
        )
        .unwrap();
        let world: f64 = out.task_force.dot(&out.vel);
        let local: f64 = out
            .axes
            .iter()
            .map(|a| -(a.stiffness_force + a.damping_force) * a.vel)
            .sum();
        assert!((world - local).abs() < 1e-9, "{world} vs {local}");
        assert!(((x_d - &out.pose) - &out.err).norm() < 1e-12);
    }

    fn master_params() -> MasterParams {
        MasterParams {
            fic: vec![FicParams::calibrate(10.0, 0.05, 50.0, 5.0).unwrap(); 2],
            k_a: 1.0,
            mass: 0.5,
            hand_stiffness: 2000.0,
            hand_damping: 40.0,
            vel_epsilon: 1e-4,
        }
    }

    fn vec2(a: f64, b: f64) -> DVector<f64> {
        DVector::from_vec(vec![a, b])
    }

    #[test]
    fn master_at_rest_produces_nothing() {
        let p = master_params();
        let (w, _) = master_wrench(
            &p,
            &[AxisErrorState::default(); 2],
            &[AxisFicState::default(); 2],
            &vec2(0.0, 0.0),
        );
        assert_eq!(w.total, vec2(0.0, 0.0));
    }

    #[test]
    fn master_feedback_is_scaled_by_k_a() {
        let p = master_params();
        let (w, _) = master_wrench(
            &p,
            &[AxisErrorState::default(); 2],
            &[AxisFicState::default(); 2],
            &vec2(0.0, -5.0),
        );
        assert_eq!(w.feedback, vec2(0.0, -5.0));
        assert_eq!(w.total, vec2(0.0, -5.0));
    }

    #[test]
    fn master_workspace_spring_saturates() {
        let p = master_params();
        let far = AxisErrorState::new(-0.2, 0.0);
        let (w, _) = master_wrench(
            &p,
            &[far, AxisErrorState::default()],
            &[AxisFicState::default(); 2],
            &vec2(0.0, 0.0),
        );
        assert!((w.workspace[0].stiffness_force.abs() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn virtual_force_is_linear() {
        assert_eq!(virtual_force(100.0, &vec2(0.0, 0.0)), vec2(0.0, 0.0));
        let f = virtual_force(100.0, &vec2(0.02, 0.0));
        assert!((f - vec2(2.0, 0.0)).norm() < 1e-12);
        let a = vec2(0.013, -0.2);
        let b = vec2(-0.07, 0.031);
        let lhs = virtual_force(37.0, &(&a + &b));
        let rhs = virtual_force(37.0, &a) + virtual_force(37.0, &b);
        assert!((lhs - rhs).amax() <= 1e-12);
    }

    #[test]
    fn velocity_mode_integrates_only_while_held() {
        let mut cmd = TeleopCommand {
            master_err: vec2(0.1, 0.0),
            gripper_held: false,
            x_desired: vec2(0.5, 0.3),
        };
        assert_eq!(velocity_mode_update(&cmd, 1.0, 1e-3), cmd);
        cmd.gripper_held = true;
        let start = cmd.x_desired.clone();
        for _ in 0..1000 {
            cmd = velocity_mode_update(&cmd, 1.0, 1e-3);
        }
        assert!((&cmd.x_desired - &start - vec2(0.1, 0.0)).norm() < 1e-12);
        cmd.master_err = vec2(0.0, 0.0);
        assert_eq!(velocity_mode_update(&cmd, 1.0, 1e-3), cmd);
    }

    #[test]
    fn at_rest_on_reference_both_laws_reduce_to_gravity_compensation() {
        let model = ManipulatorModel::planar_3link();
        let q = DVector::from_vec(vec![0.3, 0.8, -0.5]);
        let state = JointState::at_rest(q.clone());
        let pose = model.forward_kinematics(&q);
        let p = replica_params(&model);
        let zero = DVector::zeros(2);
        let (fic, _) = replica_torque_fic(
            &p,
            &model,
            &state,
            &pose,
            &zero,
            &q,
            &[AxisFicState::default(); 2],
        )
        .unwrap();
        let g = model.dynamics_terms(&q, &state.qd).unwrap().g;
        assert_eq!(fic.tau, g);
        let ic = replica_torque_ic(
            &IcParams::matching(&p, 8.0),
            &model,
            &state,
            &pose,
            &zero,
            &q,
        )
        .unwrap();
        assert_eq!(ic.tau, g);
    }

    #[test]
    fn ic_is_hookean() {
        let model = ManipulatorModel::planar_2link();
        let q = DVector::from_vec(vec![0.2, 1.2]);
        let state = JointState::at_rest(q.clone());
        let pose = model.forward_kinematics(&q);
        let mut ic = IcParams::matching(&replica_params(&model), 8.0);
        ic.k = vec![100.0, 100.0];
        let target = &pose + vec2(0.1, 0.0);
        let out = replica_torque_ic(&ic, &model, &state, &target, &vec2(0.0, 0.0), &q).unwrap();
        assert!((out.axes[0].stiffness_force - 10.0).abs() < 1e-12);
        assert_eq!(out.axes[1].stiffness_force, 0.0);
    }

    #[test]
    fn fic_stiffness_force_is_bounded_on_every_axis() {
        let model = ManipulatorModel::planar_2link();
        let p = replica_params(&model);
        let q = DVector::from_vec(vec![0.2, 1.2]);
        let state = JointState {
            q: q.clone(),
            qd: vec2(0.7, -1.1),
        };
        for &off in &[0.0, 0.01, 0.05, 0.099, 0.1, 0.3, 3.0] {
            let target = model.forward_kinematics(&q) + vec2(off, -off);
            let (out, _) = replica_torque_fic(
                &p,
                &model,
                &state,
                &target,
                &vec2(0.0, 0.0),
                &q,
                &[AxisFicState::default(); 2],
            )
            .unwrap();
            for (a, fp) in out.axes.iter().zip(&p.fic) {
                assert!(a.stiffness_force.abs() <= fp.force_bound() + 1e-12);
            }
        }
    }

    #[test]
    fn swapping_laws_only_changes_the_task_terms() {
        let model = ManipulatorModel::planar_3link();
        let q = DVector::from_vec(vec![0.4, 0.9, -0.6]);
        let state = JointState {
            q: q.clone(),
            qd: DVector::from_vec(vec![0.3, -0.2, 0.5]),
        };
        let p = replica_params(&model);
        let target = model.forward_kinematics(&q) + vec2(0.03, 0.01);
        let f_v = vec2(1.0, -2.0);
        let q_ref = DVector::from_vec(vec![0.0, 1.0, -0.5]);
        let (fic, _) = replica_torque_fic(
            &p,
            &model,
            &state,
            &target,
            &f_v,
            &q_ref,
            &[AxisFicState::default(); 2],
        )
        .unwrap();
        let ic = replica_torque_ic(
            &IcParams::matching(&p, 8.0),
            &model,
            &state,
            &target,
            &f_v,
            &q_ref,
        )
        .unwrap();
        assert_eq!(fic.h, ic.h);
        assert_eq!(fic.tau_null, ic.tau_null);
        assert_eq!(fic.gravity, ic.gravity);
        assert_ne!(fic.task_force, ic.task_force);
    }

    #[test]
    fn rejects_mismatched_axes() {
        let model = ManipulatorModel::planar_2link();
        let mut p = replica_params(&model);
        p.fic.pop();
        assert!(p.validate(&model).is_err());
        assert!(master_params().validate(3).is_err());
    }
}
