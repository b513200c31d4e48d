//! Test-only oracles, coded independently of the library's analytic paths.
#![allow(dead_code)]

use fic_teleop::dynamics::ManipulatorModel;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.random_range(lo..hi)))
}

/// Center-of-mass positions by direct summation of link segments.
pub fn com_positions(model: &ManipulatorModel, q: &DVector<f64>) -> Vec<[f64; 2]> {
    let mut out = Vec::new();
    let mut angle = 0.0;
    let mut base = [0.0, 0.0];
    for (i, link) in model.links.iter().enumerate() {
        angle += q[i];
        out.push([
            base[0] + link.com * angle.cos(),
            base[1] + link.com * angle.sin(),
        ]);
        base = [
            base[0] + link.length * angle.cos(),
            base[1] + link.length * angle.sin(),
        ];
    }
    out
}

pub fn tip_position(model: &ManipulatorModel, q: &DVector<f64>) -> [f64; 2] {
    let mut angle = 0.0;
    let mut p = [0.0, 0.0];
    for (i, link) in model.links.iter().enumerate() {
        angle += q[i];
        p = [
            p[0] + link.length * angle.cos(),
            p[1] + link.length * angle.sin(),
        ];
    }
    p
}

/// Kinetic energy with link velocities from central differences of positions.
pub fn kinetic_energy(model: &ManipulatorModel, q: &DVector<f64>, qd: &DVector<f64>) -> f64 {
    let h = 1e-5;
    let plus = com_positions(model, &(q + qd * h));
    let minus = com_positions(model, &(q - qd * h));
    let mut omega = 0.0;
    let mut t = 0.0;
    for (i, link) in model.links.iter().enumerate() {
        omega += qd[i];
        let vx = (plus[i][0] - minus[i][0]) / (2.0 * h);
        let vy = (plus[i][1] - minus[i][1]) / (2.0 * h);
        let i_com = link.inertia - link.mass * link.com * link.com;
        t += 0.5 * link.mass * (vx * vx + vy * vy) + 0.5 * i_com * omega * omega;
    }
    t
}

pub fn potential_energy(model: &ManipulatorModel, q: &DVector<f64>) -> f64 {
    com_positions(model, q)
        .iter()
        .zip(&model.links)
        .map(|(p, l)| -l.mass * (model.gravity[0] * p[0] + model.gravity[1] * p[1]))
        .sum()
}

/// Mass matrix by polarization of the (quadratic) kinetic energy.
pub fn mass_matrix(model: &ManipulatorModel, q: &DVector<f64>) -> DMatrix<f64> {
    let n = model.dof();
    let e = |i: usize| {
        let mut v = DVector::zeros(n);
        v[i] = 1.0;
        v
    };
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let tij = kinetic_energy(model, q, &(e(i) + e(j)));
            let ti = kinetic_energy(model, q, &e(i));
            let tj = kinetic_energy(model, q, &e(j));
            m[(i, j)] = tij - ti - tj;
        }
    }
    m
}

pub fn gravity_torque(model: &ManipulatorModel, q: &DVector<f64>) -> DVector<f64> {
    let h = 1e-6;
    let n = model.dof();
    DVector::from_iterator(
        n,
        (0..n).map(|i| {
            let mut dq = DVector::zeros(n);
            dq[i] = h;
            (potential_energy(model, &(q + &dq)) - potential_energy(model, &(q - &dq))) / (2.0 * h)
        }),
    )
}

/// Coriolis/centrifugal torque from Lagrange's equations at zero acceleration:
/// `c = (dM/dt) qd - 1/2 d(qd^T M qd)/dq`.
pub fn coriolis_torque(
    model: &ManipulatorModel,
    q: &DVector<f64>,
    qd: &DVector<f64>,
) -> DVector<f64> {
    let h = 1e-4;
    let n = model.dof();
    let m_dot = (mass_matrix(model, &(q + qd * h)) - mass_matrix(model, &(q - qd * h))) / (2.0 * h);
    let mut c = m_dot * qd;
    for i in 0..n {
        let mut dq = DVector::zeros(n);
        dq[i] = h;
        let mp = mass_matrix(model, &(q + &dq));
        let mm = mass_matrix(model, &(q - &dq));
        c[i] -= 0.5 * qd.dot(&((mp - mm) * qd)) / (2.0 * h);
    }
    c
}

/// Jacobian of the tip by central differences.
pub fn jacobian_fd(model: &ManipulatorModel, q: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let n = model.dof();
    let mut j = DMatrix::zeros(2, n);
    for k in 0..n {
        let mut dq = DVector::zeros(n);
        dq[k] = h;
        let p = tip_position(model, &(q + &dq));
        let m = tip_position(model, &(q - &dq));
        j[(0, k)] = (p[0] - m[0]) / (2.0 * h);
        j[(1, k)] = (p[1] - m[1]) / (2.0 * h);
    }
    j
}

/// `J_dot qd` as the second derivative of the tip along the line `q + s qd`.
pub fn jdot_qd_fd(model: &ManipulatorModel, q: &DVector<f64>, qd: &DVector<f64>) -> DVector<f64> {
    let h = 1e-4;
    let p = tip_position(model, &(q + qd * h));
    let c = tip_position(model, q);
    let m = tip_position(model, &(q - qd * h));
    DVector::from_vec(vec![
        (p[0] - 2.0 * c[0] + m[0]) / (h * h),
        (p[1] - 2.0 * c[1] + m[1]) / (h * h),
    ])
}

/// Bias wrench assembled from the oracle terms.
pub fn bias_wrench(model: &ManipulatorModel, q: &DVector<f64>, qd: &DVector<f64>) -> DVector<f64> {
    let m_inv = mass_matrix(model, q).try_inverse().unwrap();
    let j = jacobian_fd(model, q, 1e-6);
    let lambda = (&j * &m_inv * j.transpose()).try_inverse().unwrap();
    lambda * (&j * m_inv * coriolis_torque(model, q, qd) - jdot_qd_fd(model, q, qd))
}

/// Releases a point mass from error `e0` under the FIC law alone for 5 s.
/// Returns `(speed at the first zero crossing, or the final speed if it never
/// crosses; overshoot fraction past the reference)`.
pub fn release_point_mass(
    p: &fic_teleop::fic::FicParams,
    e0: f64,
    mass: f64,
    dt: f64,
) -> (f64, f64) {
    use fic_teleop::fic::{fic_wrench, AxisErrorState, AxisFicState, DEFAULT_VEL_EPSILON};
    let side = e0.signum();
    let (mut x, mut v) = (-e0, 0.0);
    let mut state = AxisFicState::default();
    let mut crossing = None;
    let mut overshoot: f64 = 0.0;
    for _ in 0..(5.0 / dt) as usize {
        let (out, next) = fic_wrench(AxisErrorState::new(-x, -v), &state, p, DEFAULT_VEL_EPSILON);
        state = next;
        v += out.force / mass * dt;
        let x_next = x + v * dt;
        if crossing.is_none() && x * side < 0.0 && x_next * side >= 0.0 {
            crossing = Some(v.abs());
        }
        x = x_next;
        overshoot = overshoot.max(x * side / e0.abs());
    }
    (crossing.unwrap_or(v.abs()), overshoot)
}

/// Velocity response of `m x'' + c x' + k x = f` to a force record sampled at
/// `fs`, integrated with `sub` RK4 substeps per sample (force held).
pub fn oscillator_velocity(force: &[f64], fs: f64, m: f64, c: f64, k: f64, sub: usize) -> Vec<f64> {
    let h = 1.0 / (fs * sub as f64);
    let (mut x, mut v) = (0.0_f64, 0.0_f64);
    let acc = |x: f64, v: f64, f: f64| (f - c * v - k * x) / m;
    let mut out = Vec::with_capacity(force.len());
    for &f in force {
        out.push(v);
        for _ in 0..sub {
            let (k1x, k1v) = (v, acc(x, v, f));
            let (k2x, k2v) = (
                v + 0.5 * h * k1v,
                acc(x + 0.5 * h * k1x, v + 0.5 * h * k1v, f),
            );
            let (k3x, k3v) = (
                v + 0.5 * h * k2v,
                acc(x + 0.5 * h * k2x, v + 0.5 * h * k2v, f),
            );
            let (k4x, k4v) = (v + h * k3v, acc(x + h * k3x, v + h * k3v, f));
            x += h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);
            v += h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
        }
    }
    out
}

/// Uniform white noise in [-1, 1).
pub fn white_noise(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

/// Composite Gauss-Legendre (5 point) quadrature on `n` panels.
pub fn gauss_legendre<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    const X: [f64; 5] = [
        0.0,
        -0.538_469_310_105_683_1,
        0.538_469_310_105_683_1,
        -0.906_179_845_938_664,
        0.906_179_845_938_664,
    ];
    const W: [f64; 5] = [
        0.568_888_888_888_888_9,
        0.478_628_670_499_366_5,
        0.478_628_670_499_366_5,
        0.236_926_885_056_189_1,
        0.236_926_885_056_189_1,
    ];
    let h = (b - a) / n as f64;
    let mut s = 0.0;
    for i in 0..n {
        let mid = a + (i as f64 + 0.5) * h;
        for j in 0..5 {
            s += W[j] * f(mid + 0.5 * h * X[j]);
        }
    }
    0.5 * h * s
}
