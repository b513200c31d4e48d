//! Planar serial-chain kinematics and rigid-body dynamics.
//!
//! Joint-space model: `M(q) qdd + c(q, qd) + g(q) = tau + J^T f_ext`.
//! All quantities are expressed in the base frame; angles are absolute
//! (`theta_i = q_1 + ... + q_i`).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest singular value of `J` below which the damped inverse is used.
pub const SINGULARITY_THRESHOLD: f64 = 1e-4;
/// Damping of the pseudo-inverse near singular configurations.
pub const PSEUDO_INVERSE_DAMPING: f64 = 1e-6;
/// Step along `qd` for the finite-difference estimate of `J_dot qd`.
const JDOT_STEP: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("expected {expected} joint values, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("mass matrix is not positive definite at q = {0:?}")]
    SingularInertia(Vec<f64>),
    #[error("non-finite joint torque {0:?}")]
    NonFiniteTorque(Vec<f64>),
    #[error("time step {0} s outside (0, 0.01]")]
    BadTimeStep(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    /// Joint-to-joint length (m).
    pub length: f64,
    pub mass: f64,
    /// Distance from the joint to the link's center of mass, along the link (m).
    pub com: f64,
    /// Rotational inertia about the joint axis (kg m^2).
    pub inertia: f64,
}

impl Link {
    /// Thin rod of uniform density.
    pub fn rod(length: f64, mass: f64) -> Self {
        Link {
            length,
            mass,
            com: 0.5 * length,
            inertia: mass * length * length / 3.0,
        }
    }

    /// All mass concentrated at the distal joint.
    pub fn point_mass(length: f64, mass: f64) -> Self {
        Link {
            length,
            mass,
            com: length,
            inertia: mass * length * length,
        }
    }

    fn com_inertia(&self) -> f64 {
        (self.inertia - self.mass * self.com * self.com).max(0.0)
    }
}

/// Planar revolute chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManipulatorModel {
    pub links: Vec<Link>,
    /// Per-joint `(lower, upper)` limits (rad).
    pub joint_limits: Vec<(f64, f64)>,
    pub gravity: [f64; 2],
    /// Control the end-effector angle as a third task axis.
    #[serde(default)]
    pub orientation: bool,
    /// Symmetric clamp applied to commanded joint torques (N m).
    #[serde(default)]
    pub torque_limit: Option<f64>,
}

impl ManipulatorModel {
    pub fn new(links: Vec<Link>, gravity: [f64; 2]) -> Result<Self, DynamicsError> {
        let n = links.len();
        let model = ManipulatorModel {
            links,
            joint_limits: vec![(-std::f64::consts::PI, std::f64::consts::PI); n],
            gravity,
            orientation: false,
            torque_limit: None,
        };
        model.validate()?;
        Ok(model)
    }

    /// Desk-scale two-link arm moving in a vertical plane.
    pub fn planar_2link() -> Self {
        let mut m =
            ManipulatorModel::new(vec![Link::rod(0.5, 2.0), Link::rod(0.5, 1.5)], [0.0, -9.81])
                .expect("valid default model");
        m.joint_limits = vec![(-2.8, 2.8), (-2.8, 2.8)];
        m
    }

    /// Three-link arm with a 2D position task: one degree of redundancy.
    pub fn planar_3link() -> Self {
        let mut m = ManipulatorModel::new(
            vec![
                Link::rod(0.4, 2.0),
                Link::rod(0.35, 1.5),
                Link::rod(0.25, 1.0),
            ],
            [0.0, -9.81],
        )
        .expect("valid default model");
        m.joint_limits = vec![(-2.8, 2.8); 3];
        m
    }

    /// Structural checks. Controllers additionally need `dof >= task_dim`,
    /// see [`ManipulatorModel::validate_for_control`].
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let bad = |msg: String| Err(DynamicsError::InvalidModel(msg));
        if self.links.is_empty() {
            return bad("at least one link required".into());
        }
        for (i, l) in self.links.iter().enumerate() {
            if !(l.length > 0.0 && l.length.is_finite()) {
                return bad(format!("link {i} length must be positive"));
            }
            if !(l.mass > 0.0 && l.mass.is_finite()) {
                return bad(format!("link {i} mass must be positive"));
            }
            if !l.com.is_finite() || l.com < 0.0 || l.com > l.length {
                return bad(format!("link {i} center of mass must lie on the link"));
            }
            if !l.inertia.is_finite() || l.inertia < l.mass * l.com * l.com * (1.0 - 1e-12) {
                return bad(format!("link {i} joint inertia below m * com^2"));
            }
        }
        if self.joint_limits.len() != self.links.len() {
            return bad("one joint limit pair per link required".into());
        }
        if self
            .joint_limits
            .iter()
            .any(|(lo, hi)| lo.is_nan() || hi.is_nan() || lo >= hi)
        {
            return bad("joint limits must satisfy lower < upper".into());
        }
        if self.gravity.iter().any(|g| !g.is_finite()) {
            return bad("gravity must be finite".into());
        }
        if self.orientation && self.links.len() < 3 {
            return bad("orientation control needs at least 3 joints".into());
        }
        Ok(())
    }

    pub fn validate_for_control(&self) -> Result<(), DynamicsError> {
        self.validate()?;
        if self.dof() < self.task_dim() {
            return Err(DynamicsError::InvalidModel(format!(
                "{} joints cannot control {} task axes",
                self.dof(),
                self.task_dim()
            )));
        }
        Ok(())
    }

    pub fn dof(&self) -> usize {
        self.links.len()
    }

    /// Number of controlled task axes.
    pub fn task_dim(&self) -> usize {
        if self.orientation {
            3
        } else {
            2
        }
    }

    fn check(&self, q: &DVector<f64>) -> Result<(), DynamicsError> {
        if q.len() != self.dof() {
            return Err(DynamicsError::Dimension {
                expected: self.dof(),
                got: q.len(),
            });
        }
        Ok(())
    }

    fn absolute_angles(&self, q: &DVector<f64>) -> Vec<f64> {
        q.iter()
            .scan(0.0, |acc, qi| {
                *acc += qi;
                Some(*acc)
            })
            .collect()
    }

    /// Base, elbow(s) and end-effector positions.
    pub fn joint_positions(&self, q: &DVector<f64>) -> Vec<[f64; 2]> {
        let th = self.absolute_angles(q);
        let mut pts = Vec::with_capacity(self.dof() + 1);
        let mut p = [0.0, 0.0];
        pts.push(p);
        for (l, t) in self.links.iter().zip(&th) {
            p = [p[0] + l.length * t.cos(), p[1] + l.length * t.sin()];
            pts.push(p);
        }
        pts
    }

    /// End-effector pose: position, plus the absolute angle when the model
    /// controls orientation.
    pub fn forward_kinematics(&self, q: &DVector<f64>) -> DVector<f64> {
        let pts = self.joint_positions(q);
        let ee = pts[pts.len() - 1];
        if self.orientation {
            DVector::from_vec(vec![ee[0], ee[1], q.sum()])
        } else {
            DVector::from_vec(vec![ee[0], ee[1]])
        }
    }

    /// End-effector Jacobian (task_dim x dof).
    pub fn jacobian(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dof();
        let th = self.absolute_angles(q);
        let mut j = DMatrix::zeros(self.task_dim(), n);
        // Column k collects the perpendicular of every segment distal to joint k.
        let mut sx = 0.0;
        let mut sy = 0.0;
        for k in (0..n).rev() {
            let l = self.links[k].length;
            sx -= l * th[k].sin();
            sy += l * th[k].cos();
            j[(0, k)] = sx;
            j[(1, k)] = sy;
            if self.orientation {
                j[(2, k)] = 1.0;
            }
        }
        j
    }

    /// Linear Jacobian of the center of mass of link `i` (2 x dof).
    fn com_jacobian(&self, th: &[f64], i: usize) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(2, self.dof());
        for k in 0..=i {
            let mut sx = -self.links[i].com * th[i].sin();
            let mut sy = self.links[i].com * th[i].cos();
            for (link, &a) in self.links[k..i].iter().zip(&th[k..i]) {
                sx -= link.length * a.sin();
                sy += link.length * a.cos();
            }
            j[(0, k)] = sx;
            j[(1, k)] = sy;
        }
        j
    }

    /// Mass matrix, Coriolis/centrifugal torque `C(q, qd) qd` and gravity torque.
    pub fn dynamics_terms(
        &self,
        q: &DVector<f64>,
        qd: &DVector<f64>,
    ) -> Result<DynamicsTerms, DynamicsError> {
        self.check(q)?;
        self.check(qd)?;
        let n = self.dof();
        let th = self.absolute_angles(q);
        let om: Vec<f64> = self.absolute_angles(qd);
        let mut m = DMatrix::zeros(n, n);
        let mut c = DVector::zeros(n);
        let mut g = DVector::zeros(n);
        let grav = nalgebra::Vector2::new(self.gravity[0], self.gravity[1]);
        for (i, link) in self.links.iter().enumerate() {
            let jc = self.com_jacobian(&th, i);
            m += link.mass * jc.transpose() * &jc;
            let ic = link.com_inertia();
            for a in 0..=i {
                for b in 0..=i {
                    m[(a, b)] += ic;
                }
            }
            // Centripetal acceleration of the center of mass for qdd = 0.
            let mut acc = nalgebra::Vector2::zeros();
            for jj in 0..i {
                let l = self.links[jj].length;
                acc -= om[jj] * om[jj] * l * nalgebra::Vector2::new(th[jj].cos(), th[jj].sin());
            }
            acc -= om[i] * om[i] * link.com * nalgebra::Vector2::new(th[i].cos(), th[i].sin());
            c += link.mass * jc.transpose() * acc;
            g -= link.mass * jc.transpose() * grav;
        }
        Ok(DynamicsTerms { m, c, g })
    }

    /// `J_dot qd` by a central difference of the Jacobian along `qd`.
    pub fn jacobian_dot_qd(&self, q: &DVector<f64>, qd: &DVector<f64>) -> DVector<f64> {
        let jp = self.jacobian(&(q + qd * JDOT_STEP));
        let jm = self.jacobian(&(q - qd * JDOT_STEP));
        (jp - jm) * qd / (2.0 * JDOT_STEP)
    }

    /// Everything the task-space controllers need at one state.
    pub fn task_terms(
        &self,
        q: &DVector<f64>,
        qd: &DVector<f64>,
    ) -> Result<TaskTerms, DynamicsError> {
        let dyn_terms = self.dynamics_terms(q, qd)?;
        let j = self.jacobian(q);
        let m_inv = dyn_terms
            .m
            .clone()
            .cholesky()
            .ok_or_else(|| DynamicsError::SingularInertia(q.iter().copied().collect()))?
            .inverse();
        let inertia = task_space_inertia_from(&j, &m_inv);
        let jdot_qd = self.jacobian_dot_qd(q, qd);
        let h = &inertia.lambda * (&j * &m_inv * &dyn_terms.c - jdot_qd);
        // Dynamically consistent generalized inverse and projector N = I - Jbar J.
        let jbar = &m_inv * j.transpose() * &inertia.lambda;
        let n = DMatrix::identity(self.dof(), self.dof()) - &jbar * &j;
        let pose = self.forward_kinematics(q);
        let vel = &j * qd;
        Ok(TaskTerms {
            pose,
            vel,
            j,
            m_inv,
            lambda: inertia.lambda,
            damped: inertia.damped,
            h,
            null_projector_t: n.transpose(),
            dynamics: dyn_terms,
        })
    }

    /// Task-space inertia `(J M^-1 J^T)^-1`, damped near singularities.
    pub fn task_space_inertia(&self, q: &DVector<f64>) -> Result<TaskInertia, DynamicsError> {
        let terms = self.dynamics_terms(q, &DVector::zeros(self.dof()))?;
        let m_inv = terms
            .m
            .cholesky()
            .ok_or_else(|| DynamicsError::SingularInertia(q.iter().copied().collect()))?
            .inverse();
        Ok(task_space_inertia_from(&self.jacobian(q), &m_inv))
    }

    /// Task-space bias wrench `Lambda (J M^-1 c - J_dot qd)`.
    pub fn inverse_dynamics_compensation(
        &self,
        q: &DVector<f64>,
        qd: &DVector<f64>,
    ) -> Result<DVector<f64>, DynamicsError> {
        Ok(self.task_terms(q, qd)?.h)
    }

    /// Clamp to the configured torque limit.
    pub fn limit_torque(&self, tau: DVector<f64>) -> DVector<f64> {
        match self.torque_limit {
            Some(lim) => tau.map(|t| t.clamp(-lim, lim)),
            None => tau,
        }
    }

    /// Semi-implicit Euler step with joint-limit clamping.
    pub fn integrate_step(
        &self,
        state: &JointState,
        tau: &DVector<f64>,
        ext_wrench: &DVector<f64>,
        dt: f64,
    ) -> Result<JointState, DynamicsError> {
        if !(dt > 0.0 && dt <= 1e-2) {
            return Err(DynamicsError::BadTimeStep(dt));
        }
        if tau.iter().any(|t| !t.is_finite()) {
            return Err(DynamicsError::NonFiniteTorque(
                tau.iter().copied().collect(),
            ));
        }
        let terms = self.dynamics_terms(&state.q, &state.qd)?;
        let j = self.jacobian(&state.q);
        let rhs = tau + j.transpose() * ext_wrench - &terms.c - &terms.g;
        let qdd = terms
            .m
            .cholesky()
            .ok_or_else(|| DynamicsError::SingularInertia(state.q.iter().copied().collect()))?
            .solve(&rhs);
        Ok(self.advance(state, &qdd, dt))
    }

    fn advance(&self, state: &JointState, qdd: &DVector<f64>, dt: f64) -> JointState {
        let mut qd = &state.qd + qdd * dt;
        let mut q = &state.q + &qd * dt;
        for (i, (lo, hi)) in self.joint_limits.iter().enumerate() {
            if q[i] < *lo {
                q[i] = *lo;
                qd[i] = qd[i].max(0.0);
            } else if q[i] > *hi {
                q[i] = *hi;
                qd[i] = qd[i].min(0.0);
            }
        }
        JointState { q, qd }
    }

    /// Total kinetic plus potential energy.
    pub fn mechanical_energy(&self, state: &JointState) -> f64 {
        let terms = self
            .dynamics_terms(&state.q, &state.qd)
            .expect("state dimensions match the model");
        let kinetic = 0.5 * state.qd.dot(&(&terms.m * &state.qd));
        let th = self.absolute_angles(&state.q);
        let mut potential = 0.0;
        let mut base = [0.0, 0.0];
        for (i, l) in self.links.iter().enumerate() {
            let com = [base[0] + l.com * th[i].cos(), base[1] + l.com * th[i].sin()];
            potential -= l.mass * (self.gravity[0] * com[0] + self.gravity[1] * com[1]);
            base = [
                base[0] + l.length * th[i].cos(),
                base[1] + l.length * th[i].sin(),
            ];
        }
        kinetic + potential
    }

    /// Mid-range posture.
    pub fn mid_posture(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.dof(),
            self.joint_limits.iter().map(|(lo, hi)| 0.5 * (lo + hi)),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsTerms {
    pub m: DMatrix<f64>,
    pub c: DVector<f64>,
    pub g: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskInertia {
    pub lambda: DMatrix<f64>,
    /// The damped inverse was used because `J` is near singular.
    pub damped: bool,
}

fn task_space_inertia_from(j: &DMatrix<f64>, m_inv: &DMatrix<f64>) -> TaskInertia {
    let a = j * m_inv * j.transpose();
    let sigma_min = j
        .clone()
        .singular_values()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let inverse = if sigma_min >= SINGULARITY_THRESHOLD {
        a.clone().cholesky().map(|c| c.inverse())
    } else {
        None
    };
    let (lambda, damped) = match inverse {
        Some(l) => (l, false),
        None => {
            log::warn!(
                "near-singular Jacobian (sigma_min = {sigma_min:.3e}); using damped inverse"
            );
            let lam2 = PSEUDO_INVERSE_DAMPING * PSEUDO_INVERSE_DAMPING;
            let reg = &a * &a + DMatrix::identity(a.nrows(), a.nrows()) * lam2;
            let inv = reg
                .cholesky()
                .map(|c| c.inverse())
                .unwrap_or_else(|| DMatrix::zeros(a.nrows(), a.nrows()));
            (&a * inv, true)
        }
    };
    // Symmetrize away round-off.
    let lambda = 0.5 * (&lambda + lambda.transpose());
    TaskInertia { lambda, damped }
}

/// Kinematic and dynamic quantities at one joint state.
#[derive(Debug, Clone)]
pub struct TaskTerms {
    pub pose: DVector<f64>,
    pub vel: DVector<f64>,
    pub j: DMatrix<f64>,
    pub m_inv: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub damped: bool,
    /// Inverse-dynamics compensation wrench.
    pub h: DVector<f64>,
    /// `N^T = I - J^T Jbar^T`, mapping joint torques into the null space.
    pub null_projector_t: DMatrix<f64>,
    pub dynamics: DynamicsTerms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub q: DVector<f64>,
    pub qd: DVector<f64>,
}

impl JointState {
    pub fn at_rest(q: DVector<f64>) -> Self {
        let n = q.len();
        JointState {
            q,
            qd: DVector::zeros(n),
        }
    }
}
