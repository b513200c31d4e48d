//! Per-axis fractal impedance controller.
//!
//! Each task-space axis runs an independent scalar controller with an
//! anisotropic stiffness profile: a saturating, hardening spring while the
//! error grows (divergence) and an energy-redistributing profile while the
//! error shrinks (convergence). The hysteresis between the two phases is what
//! makes the controller passive without relying on damping.
//!
//! Sign convention used throughout: `err = x_ref - x` and `vel = d(err)/dt`.
//! A positive stiffness produces a force `K * err` that pulls the axis back
//! toward its reference, and the damping force is `d * vel`, which for a
//! static reference equals `-d * x_dot`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default dead band on the error rate used for phase detection.
pub const DEFAULT_VEL_EPSILON: f64 = 1e-4;

/// Below this error magnitude the convergence law is evaluated in force form.
const CONVERGENCE_FORCE_FORM_BAND: f64 = 1e-9;

/// Absolute tolerance of the stored-energy quadrature (J).
const ENERGY_QUADRATURE_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FicError {
    #[error("{name} must be finite and positive, got {value}")]
    NotPositive { name: &'static str, value: f64 },
    #[error("{name} must be finite and non-negative, got {value}")]
    Negative { name: &'static str, value: f64 },
    #[error("w_max / x_b = {k_max} must exceed 1 for a real saturation shape")]
    DegenerateSaturation { k_max: f64 },
}

/// Calibrated parameters of one controlled axis.
///
/// `k_max` and `beta` are derived from `w_max` and `x_b`; construct through
/// [`FicParams::calibrate`] so that they stay consistent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FicSettings", into = "FicSettings")]
pub struct FicParams {
    w_max: f64,
    x_b: f64,
    k_0: f64,
    d: f64,
    beta: f64,
    k_max: f64,
}

/// The user-facing calibration inputs; the serialized form of [`FicParams`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FicSettings {
    pub w_max: f64,
    pub x_b: f64,
    pub k_0: f64,
    pub d: f64,
}

impl TryFrom<FicSettings> for FicParams {
    type Error = FicError;

    fn try_from(s: FicSettings) -> Result<Self, Self::Error> {
        FicParams::calibrate(s.w_max, s.x_b, s.k_0, s.d)
    }
}

impl From<FicParams> for FicSettings {
    fn from(p: FicParams) -> Self {
        FicSettings {
            w_max: p.w_max,
            x_b: p.x_b,
            k_0: p.k_0,
            d: p.d,
        }
    }
}

fn positive(name: &'static str, value: f64) -> Result<f64, FicError> {
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(FicError::NotPositive { name, value })
    }
}

fn non_negative(name: &'static str, value: f64) -> Result<f64, FicError> {
    if value.is_finite() && value >= 0.0 {
        Ok(value)
    } else {
        Err(FicError::Negative { name, value })
    }
}

impl FicParams {
    /// Derives the stiffness at the saturation onset (`k_max = w_max / x_b`)
    /// and the shape factor `beta = sqrt(ln(k_max)) / x_b`, so that the
    /// variable stiffness `exp((beta * x_b)^2)` reaches `k_max` exactly at `x_b`.
    pub fn calibrate(w_max: f64, x_b: f64, k_0: f64, d: f64) -> Result<Self, FicError> {
        let w_max = positive("w_max", w_max)?;
        let x_b = positive("x_b", x_b)?;
        let k_0 = non_negative("k_0", k_0)?;
        let d = non_negative("d", d)?;
        let k_max = w_max / x_b;
        if k_max.is_nan() || k_max <= 1.0 {
            return Err(FicError::DegenerateSaturation { k_max });
        }
        let beta = (k_max.ln() / (x_b * x_b)).sqrt();
        Ok(FicParams {
            w_max,
            x_b,
            k_0,
            d,
            beta,
            k_max,
        })
    }

    pub fn w_max(&self) -> f64 {
        self.w_max
    }

    pub fn x_b(&self) -> f64 {
        self.x_b
    }

    pub fn k_0(&self) -> f64 {
        self.k_0
    }

    pub fn d(&self) -> f64 {
        self.d
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn k_max(&self) -> f64 {
        self.k_max
    }

    /// Upper bound on the magnitude of the stiffness force in either phase.
    pub fn force_bound(&self) -> f64 {
        self.w_max + self.k_0 * self.x_b
    }

    /// Same parameters with a different damping gain.
    pub fn with_damping(mut self, d: f64) -> Result<Self, FicError> {
        self.d = non_negative("d", d)?;
        Ok(self)
    }
}

/// Total divergence-phase stiffness `K_0 + K_v(|err|)`.
///
/// Below `x_b` the variable part is `exp((beta*err)^2)`; beyond it the total
/// stiffness is `w_max / |err|`, so the force saturates at `w_max`. The
/// profile jumps down by exactly `k_0` when crossing `x_b`.
pub fn divergence_stiffness(err: f64, p: &FicParams) -> f64 {
    let s = err.abs();
    if s > p.x_b {
        p.w_max / s
    } else {
        let z = p.beta * s;
        p.k_0 + (z * z).exp()
    }
}

/// Divergence-phase force magnitude at error magnitude `s`.
fn divergence_force_magnitude(s: f64, p: &FicParams) -> f64 {
    if s > p.x_b {
        p.w_max
    } else {
        divergence_stiffness(s, p) * s
    }
}

/// Energy absorbed by the divergence spring when the error grows from zero
/// to `x_max_err`: the integral of `K_div(x) * x` over `[0, x_max_err]`.
pub fn stored_divergence_energy(x_max_err: f64, p: &FicParams) -> f64 {
    let s = x_max_err.abs();
    if s == 0.0 {
        return 0.0;
    }
    let f = |x: f64| divergence_force_magnitude(x, p);
    if s <= p.x_b {
        adaptive_quadrature(&f, 0.0, s, ENERGY_QUADRATURE_TOL)
    } else {
        // The profile is discontinuous at x_b; integrate each branch separately.
        adaptive_quadrature(&f, 0.0, p.x_b, 0.5 * ENERGY_QUADRATURE_TOL) + p.w_max * (s - p.x_b)
    }
}

// Gauss-Kronrod 7/15 nodes on [0, 1] and weights (symmetric about 0).
#[allow(clippy::excessive_precision)]
const GK_NODES: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.0,
];
#[allow(clippy::excessive_precision)]
const KRONROD_WEIGHTS: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
/// Gauss weights of the odd-indexed nodes above.
#[allow(clippy::excessive_precision)]
const GAUSS_WEIGHTS: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

/// Kronrod estimate and `|Kronrod - Gauss|` on one panel.
fn gauss_kronrod<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = KRONROD_WEIGHTS[7] * fc;
    let mut gauss = GAUSS_WEIGHTS[3] * fc;
    for i in 0..7 {
        let pair = f(c - h * GK_NODES[i]) + f(c + h * GK_NODES[i]);
        kronrod += KRONROD_WEIGHTS[i] * pair;
        if i % 2 == 1 {
            gauss += GAUSS_WEIGHTS[i / 2] * pair;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

/// Adaptive Gauss-Kronrod quadrature of a smooth integrand on `[a, b]` to
/// absolute tolerance `tol`.
pub(crate) fn adaptive_quadrature<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    gk_step(f, a, b, tol, 40)
}

fn gk_step<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let (value, err) = gauss_kronrod(f, a, b);
    if depth == 0 || err <= tol {
        return value;
    }
    let m = 0.5 * (a + b);
    gk_step(f, a, m, 0.5 * tol, depth - 1) + gk_step(f, m, b, 0.5 * tol, depth - 1)
}

/// Convergence-phase restoring force for an error `err` inside a cycle whose
/// divergence peak was `x_max_err` and stored `stored_energy`.
///
/// The profile is affine in `|err|`: it pulls toward the reference with
/// `2E / x_max` at the turning point, vanishes at `x_max / 2` and brakes
/// with the same magnitude at zero error, so the work done over a full
/// convergence leg is zero and the axis arrives at rest.
pub fn convergence_force(err: f64, x_max_err: f64, stored_energy: f64) -> f64 {
    if x_max_err <= 0.0 {
        return 0.0;
    }
    let s = err.abs();
    let gain = 4.0 * stored_energy / (x_max_err * x_max_err);
    gain * (s - 0.5 * x_max_err) * sign(err)
}

/// Convergence-phase stiffness, i.e. [`convergence_force`] divided by `err`.
///
/// Negative inside `|err| < x_max/2` (braking). Singular at `err = 0`, where
/// the limit is reported as `-inf` scaled by the stored energy; callers that
/// need a force should use [`convergence_force`].
pub fn convergence_stiffness(err: f64, x_max_err: f64, stored_energy: f64) -> f64 {
    if x_max_err <= 0.0 {
        return 0.0;
    }
    let s = err.abs();
    if s < CONVERGENCE_FORCE_FORM_BAND {
        return if stored_energy > 0.0 {
            f64::NEG_INFINITY
        } else {
            0.0
        };
    }
    let gain = 4.0 * stored_energy / (x_max_err * x_max_err);
    gain * (s - 0.5 * x_max_err) / s
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Phase {
    #[default]
    Divergence,
    Convergence,
}

impl Phase {
    pub fn as_index(self) -> u8 {
        match self {
            Phase::Divergence => 0,
            Phase::Convergence => 1,
        }
    }
}

/// Memory of the current hysteresis cycle of one axis.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AxisFicState {
    pub phase: Phase,
    pub x_max_err: f64,
    pub stored_energy: f64,
    pub last_err: f64,
    pub last_vel: f64,
}

/// Error and error rate of one axis.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AxisErrorState {
    pub err: f64,
    pub vel: f64,
}

impl AxisErrorState {
    pub fn new(err: f64, vel: f64) -> Self {
        AxisErrorState { err, vel }
    }
}

/// Advances the phase machine.
///
/// The axis is converging only while the error shrinks (error and rate of
/// opposite signs, with `|vel| >= vel_epsilon`) and stays within the peak of
/// the current cycle. Re-entering divergence after a convergence leg starts a
/// new cycle at the current error; during divergence the peak and the stored
/// energy follow the largest error seen.
pub fn update_phase(
    state: &AxisFicState,
    e: AxisErrorState,
    p: &FicParams,
    vel_epsilon: f64,
) -> AxisFicState {
    let s = e.err.abs();
    let shrinking = sign(e.err) * sign(e.vel) < 0.0 && e.vel.abs() >= vel_epsilon;
    let mut next = *state;
    next.last_err = e.err;
    next.last_vel = e.vel;

    // A reference jump can push |err| past the cycle peak without the rate
    // ever agreeing in sign; that is still growth of the error.
    let within_cycle = s > 0.0 && s <= state.x_max_err;
    if shrinking && within_cycle {
        next.phase = Phase::Convergence;
        return next;
    }

    match state.phase {
        Phase::Convergence => {
            next.x_max_err = s;
            next.stored_energy = stored_divergence_energy(s, p);
        }
        Phase::Divergence => {
            if s > state.x_max_err {
                next.x_max_err = s;
                next.stored_energy = stored_divergence_energy(s, p);
            }
        }
    }
    next.phase = Phase::Divergence;
    next
}

/// Force produced by one axis together with its components.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FicOutput {
    pub force: f64,
    pub stiffness_force: f64,
    pub damping_force: f64,
    pub phase: Phase,
}

/// One control update: advance the phase machine, then evaluate the active
/// stiffness profile plus damping.
pub fn fic_wrench(
    e: AxisErrorState,
    state: &AxisFicState,
    p: &FicParams,
    vel_epsilon: f64,
) -> (FicOutput, AxisFicState) {
    let next = update_phase(state, e, p, vel_epsilon);
    let stiffness_force = match next.phase {
        Phase::Divergence => divergence_force_magnitude(e.err.abs(), p) * sign(e.err),
        Phase::Convergence => convergence_force(e.err, next.x_max_err, next.stored_energy),
    };
    let damping_force = p.d * e.vel;
    (
        FicOutput {
            force: stiffness_force + damping_force,
            stiffness_force,
            damping_force,
            phase: next.phase,
        },
        next,
    )
}
