//! Penalty-contact objects and push-button fixtures.
//!
//! Contacts are unilateral spring-dampers acting on the end-effector point.
//! Buttons are ordinary contact objects with an activation latch on top.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Time the normal force must stay above the activation threshold.
pub const ACTIVATION_HOLD: f64 = 0.05;
/// Fraction of the activation force below which an active button releases.
pub const RELEASE_FRACTION: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContactError {
    #[error("object {id}: stiffness must be > 0")]
    Stiffness { id: String },
    #[error("object {id}: damping must be >= 0")]
    Damping { id: String },
    #[error("object {id}: degenerate surface")]
    Surface { id: String },
    #[error("object {id}: button activation force and travel must be > 0")]
    Button { id: String },
}

/// Geometry of a contact surface in the plane of motion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Surface {
    /// Solid on the side opposite to `normal` of the line through `point`.
    HalfPlane { point: [f64; 2], normal: [f64; 2] },
    /// Axis-aligned solid box.
    Box { min: [f64; 2], max: [f64; 2] },
}

impl Surface {
    /// Penetration depth and outward unit normal of the closest face, or
    /// `None` when the point is outside the solid.
    pub fn penetration(&self, p: [f64; 2]) -> Option<(f64, [f64; 2])> {
        match *self {
            Surface::HalfPlane { point, normal } => {
                let n = normalize(normal);
                let depth = -((p[0] - point[0]) * n[0] + (p[1] - point[1]) * n[1]);
                (depth > 0.0).then_some((depth, n))
            }
            Surface::Box { min, max } => {
                let inside = p[0] > min[0] && p[0] < max[0] && p[1] > min[1] && p[1] < max[1];
                if !inside {
                    return None;
                }
                let faces = [
                    (p[0] - min[0], [-1.0, 0.0]),
                    (max[0] - p[0], [1.0, 0.0]),
                    (p[1] - min[1], [0.0, -1.0]),
                    (max[1] - p[1], [0.0, 1.0]),
                ];
                faces.into_iter().min_by(|a, b| a.0.total_cmp(&b.0))
            }
        }
    }

    fn is_valid(&self) -> bool {
        match *self {
            Surface::HalfPlane { point, normal } => {
                point.iter().chain(&normal).all(|v| v.is_finite())
                    && normal[0].hypot(normal[1]) > 0.0
            }
            Surface::Box { min, max } => {
                min.iter().chain(&max).all(|v| v.is_finite()) && min[0] < max[0] && min[1] < max[1]
            }
        }
    }
}

fn normalize(v: [f64; 2]) -> [f64; 2] {
    let n = v[0].hypot(v[1]);
    [v[0] / n, v[1] / n]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ButtonSpec {
    pub activation_force: f64,
    pub activation_travel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactObject {
    pub id: String,
    pub surface: Surface,
    pub stiffness: f64,
    pub damping: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub button: Option<ButtonSpec>,
}

impl ContactObject {
    pub fn validate(&self) -> Result<(), ContactError> {
        let id = || self.id.clone();
        if !(self.stiffness.is_finite() && self.stiffness > 0.0) {
            return Err(ContactError::Stiffness { id: id() });
        }
        if !(self.damping.is_finite() && self.damping >= 0.0) {
            return Err(ContactError::Damping { id: id() });
        }
        if !self.surface.is_valid() {
            return Err(ContactError::Surface { id: id() });
        }
        if let Some(b) = self.button {
            if !(b.activation_force > 0.0 && b.activation_travel > 0.0) {
                return Err(ContactError::Button { id: id() });
            }
        }
        Ok(())
    }

    /// Push-button whose cap is the top face of a box centred on
    /// `top_center`. The spring reaches the activation force at full travel.
    pub fn button(id: &str, top_center: [f64; 2], spec: ButtonSpec) -> Self {
        let half_width = 0.015;
        let depth = 0.05;
        let stiffness = spec.activation_force / spec.activation_travel;
        ContactObject {
            id: id.to_string(),
            surface: Surface::Box {
                min: [top_center[0] - half_width, top_center[1] - depth],
                max: [top_center[0] + half_width, top_center[1]],
            },
            stiffness,
            damping: 0.05 * stiffness.sqrt(),
            button: Some(spec),
        }
    }
}

/// Wrench on the end-effector from one object.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ContactResult {
    pub wrench: [f64; 2],
    pub penetration: f64,
    pub normal_force: f64,
}

/// Unilateral penalty force: spring on the penetration plus damping on the
/// approach speed only, never pulling.
pub fn contact_wrench(obj: &ContactObject, ee_pos: [f64; 2], ee_vel: [f64; 2]) -> ContactResult {
    let Some((depth, n)) = obj.surface.penetration(ee_pos) else {
        return ContactResult::default();
    };
    let normal_vel = ee_vel[0] * n[0] + ee_vel[1] * n[1];
    let force = (obj.stiffness * depth + obj.damping * (-normal_vel).max(0.0)).max(0.0);
    ContactResult {
        wrench: [force * n[0], force * n[1]],
        penetration: depth,
        normal_force: force,
    }
}

/// Activation memory of one button.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ButtonLatch {
    pub active: bool,
    above_since: Option<f64>,
    pub activations: u32,
    pub last_activation: Option<f64>,
    pub last_deactivation: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ButtonEvent {
    Activated,
    Deactivated,
}

impl ButtonLatch {
    /// Feeds the normal force at time `t`; returns an edge if one occurred.
    pub fn update(&mut self, spec: &ButtonSpec, normal_force: f64, t: f64) -> Option<ButtonEvent> {
        if self.active {
            if normal_force < RELEASE_FRACTION * spec.activation_force {
                self.active = false;
                self.above_since = None;
                self.last_deactivation = Some(t);
                return Some(ButtonEvent::Deactivated);
            }
            return None;
        }
        if normal_force >= spec.activation_force {
            let since = *self.above_since.get_or_insert(t);
            // Half-tick tolerance so a hold of exactly 50 ms counts.
            if t - since >= ACTIVATION_HOLD - 1e-9 {
                self.active = true;
                self.activations += 1;
                self.last_activation = Some(t);
                return Some(ButtonEvent::Activated);
            }
        } else {
            self.above_since = None;
        }
        None
    }
}

/// Five synthetic objects from sponge-like to metal-like, log-spaced in
/// stiffness between 1e2 and 1e5 N/m.
pub fn object_catalog() -> Vec<ContactObject> {
    const NAMES: [&str; 5] = ["sponge", "foam", "rubber", "wood", "metal"];
    NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let stiffness = 10f64.powf(2.0 + 0.75 * i as f64);
            ContactObject {
                id: name.to_string(),
                surface: Surface::HalfPlane {
                    point: [0.0, 0.2],
                    normal: [0.0, 1.0],
                },
                stiffness,
                damping: 0.05 * (stiffness * 1.0).sqrt(),
                button: None,
            }
        })
        .collect()
}

/// The two E-stop fixtures, 0.10 m apart along x with caps at height `top`.
pub fn estop_pair(first_x: f64, top: f64) -> [ContactObject; 2] {
    let spec = ButtonSpec {
        activation_force: 5.0,
        activation_travel: 0.005,
    };
    [
        ContactObject::button("estop_1", [first_x, top], spec),
        ContactObject::button("estop_2", [first_x + 0.10, top], spec),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn floor(k: f64, c: f64) -> ContactObject {
        ContactObject {
            id: "floor".into(),
            surface: Surface::HalfPlane {
                point: [0.0, 0.0],
                normal: [0.0, 1.0],
            },
            stiffness: k,
            damping: c,
            button: None,
        }
    }

    #[test]
    fn outside_gives_no_force() {
        let r = contact_wrench(&floor(1e4, 10.0), [0.3, 0.01], [0.0, -1.0]);
        assert_eq!(r, ContactResult::default());
    }

    #[test]
    fn hooke_penalty() {
        let r = contact_wrench(&floor(1e4, 0.0), [0.3, -0.001], [0.0, 0.0]);
        assert!((r.normal_force - 10.0).abs() < 1e-12);
        assert_eq!(r.wrench[0], 0.0);
        assert!((r.wrench[1] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn separating_contact_has_no_damping() {
        let obj = floor(1e4, 50.0);
        let r = contact_wrench(&obj, [0.0, -0.001], [0.0, 0.5]);
        assert!((r.normal_force - 10.0).abs() < 1e-12);
        let approaching = contact_wrench(&obj, [0.0, -0.001], [0.0, -0.5]);
        assert!((approaching.normal_force - 35.0).abs() < 1e-12);
    }

    #[test]
    fn box_uses_the_nearest_face() {
        let b = ContactObject::button(
            "b",
            [0.5, 0.2],
            ButtonSpec {
                activation_force: 5.0,
                activation_travel: 0.005,
            },
        );
        assert_eq!(b.stiffness, 1000.0);
        let r = contact_wrench(&b, [0.5, 0.197], [0.0, 0.0]);
        assert!((r.penetration - 0.003).abs() < 1e-12);
        assert!(r.wrench[1] > 0.0 && r.wrench[0] == 0.0);
        let side = contact_wrench(&b, [0.4855, 0.18], [0.0, 0.0]);
        assert!(side.wrench[0] < 0.0);
    }

    #[test]
    fn catalog_is_log_spaced() {
        let cat = object_catalog();
        assert_eq!(cat.len(), 5);
        let expected = [1e2, 562.341, 3162.28, 17782.8, 1e5];
        for (o, e) in cat.iter().zip(expected) {
            assert!((o.stiffness - e).abs() / e < 1e-5, "{} vs {e}", o.stiffness);
            assert!((o.damping - 0.05 * o.stiffness.sqrt()).abs() < 1e-12);
            o.validate().unwrap();
        }
        assert!(cat.windows(2).all(|w| w[0].stiffness < w[1].stiffness));
    }

    #[test]
    fn estops_are_ten_centimetres_apart() {
        let [a, b] = estop_pair(0.4, 0.2);
        let centre = |o: &ContactObject| match o.surface {
            Surface::Box { min, max } => 0.5 * (min[0] + max[0]),
            _ => unreachable!(),
        };
        assert!((centre(&b) - centre(&a) - 0.10).abs() < 1e-12);
    }

    #[test]
    fn button_needs_a_sustained_push_and_has_hysteresis() {
        let spec = ButtonSpec {
            activation_force: 5.0,
            activation_travel: 0.005,
        };
        let mut latch = ButtonLatch::default();
        let dt = 1e-3;
        // A 30 ms spike does nothing.
        for k in 0..30 {
            assert_eq!(latch.update(&spec, 8.0, k as f64 * dt), None);
        }
        latch.update(&spec, 0.0, 0.03);
        let mut fired = None;
        for k in 0..=60 {
            let t = 0.1 + k as f64 * dt;
            if latch.update(&spec, 5.0, t) == Some(ButtonEvent::Activated) {
                fired = Some(t);
            }
        }
        assert!((fired.unwrap() - 0.15).abs() < 1e-9);
        // Dropping to 60% keeps it on; below 50% releases.
        assert_eq!(latch.update(&spec, 3.0, 0.2), None);
        assert!(latch.active);
        assert_eq!(
            latch.update(&spec, 2.4, 0.21),
            Some(ButtonEvent::Deactivated)
        );
        assert_eq!(latch.activations, 1);
        assert_eq!(latch.last_deactivation, Some(0.21));
    }

    #[test]
    fn rejects_invalid_objects() {
        assert!(floor(0.0, 1.0).validate().is_err());
        assert!(floor(1.0, -1.0).validate().is_err());
        let mut o = floor(1.0, 0.0);
        o.surface = Surface::Box {
            min: [0.0, 0.0],
            max: [0.0, 1.0],
        };
        assert!(o.validate().is_err());
    }
}
