use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Planar ego pose in the world: position on the ground plane and heading.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

/// Relative planar motion between two consecutive frames, expressed in the
/// frame of the earlier one.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EgoAction {
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
}

impl EgoAction {
    pub fn new(dx: f64, dy: f64, dtheta: f64) -> Result<Self> {
        let a = EgoAction { dx, dy, dtheta };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dx.is_finite() && self.dy.is_finite() && self.dtheta.is_finite()) {
            return Err(Error::numeric("ego action", format!("{self:?}")));
        }
        if self.dtheta.abs() >= PI {
            return Err(Error::contract(format!("|dtheta| = {} must stay below pi", self.dtheta.abs())));
        }
        Ok(())
    }
}

pub(crate) fn wrap_angle(a: f64) -> f64 {
    let mut w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Pose2 { x, y, theta }
    }

    /// Pose reached by applying `a` in this pose's frame.
    pub fn then(&self, a: &EgoAction) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2 {
            x: self.x + c * a.dx - s * a.dy,
            y: self.y + s * a.dx + c * a.dy,
            theta: wrap_angle(self.theta + a.dtheta),
        }
    }

    /// The action taking `self` to `other`.
    pub fn action_to(&self, other: &Pose2) -> EgoAction {
        let (s, c) = self.theta.sin_cos();
        let (wx, wy) = (other.x - self.x, other.y - self.y);
        EgoAction { dx: c * wx + s * wy, dy: -s * wx + c * wy, dtheta: wrap_angle(other.theta - self.theta) }
    }

    /// Local planar coordinates to world.
    pub fn to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.theta.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1], p[2]]
    }

    pub fn from_world(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.theta.sin_cos();
        let (wx, wy) = (p[0] - self.x, p[1] - self.y);
        [c * wx + s * wy, -s * wx + c * wy, p[2]]
    }

    pub fn rotate_to_world(&self, d: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.theta.sin_cos();
        [c * d[0] - s * d[1], s * d[0] + c * d[1], d[2]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn then_and_action_to_are_inverse() {
        let a = Pose2::new(1.0, -2.0, 0.4);
        let act = EgoAction::new(1.5, 0.3, -0.2).unwrap();
        let b = a.then(&act);
        let back = a.action_to(&b);
        assert!((back.dx - act.dx).abs() < 1e-12);
        assert!((back.dy - act.dy).abs() < 1e-12);
        assert!((back.dtheta - act.dtheta).abs() < 1e-12);
    }

    #[test]
    fn rotation_limit_enforced() {
        assert!(EgoAction::new(0.0, 0.0, PI).is_err());
        assert!(EgoAction::new(0.0, 0.0, 3.1).is_ok());
    }

    #[test]
    fn world_round_trip() {
        let p = Pose2::new(3.0, 4.0, 1.1);
        let q = [0.5, -2.0, 0.7];
        let r = p.from_world(p.to_world(q));
        for i in 0..3 {
            assert!((r[i] - q[i]).abs() < 1e-12);
        }
    }
}
