use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dynamics::State;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DisturbanceCase {
    None,
    /// Roll moment.
    Case1,
    /// Roll moment and side force.
    Case2,
    /// Roll moment, side force and quadratic drag.
    Case3,
    /// Side force alone.
    SideForce,
    /// Constant body force and moment given by `probe_force` and `probe_moment`.
    ConstantProbe,
}

impl DisturbanceCase {
    pub fn name(self) -> &'static str {
        match self {
            DisturbanceCase::None => "none",
            DisturbanceCase::Case1 => "case1",
            DisturbanceCase::Case2 => "case2",
            DisturbanceCase::Case3 => "case3",
            DisturbanceCase::SideForce => "side-force",
            DisturbanceCase::ConstantProbe => "constant-probe",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisturbanceSpec {
    pub case: DisturbanceCase,
    /// Drag coefficients, N s^2 / m^2, body axes.
    pub drag: Vector3<f64>,
    /// Body-frame force of the constant probe, N.
    pub probe_force: Vector3<f64>,
    /// Body-frame moment of the constant probe, N m.
    pub probe_moment: Vector3<f64>,
}

impl Default for DisturbanceSpec {
    fn default() -> Self {
        Self {
            case: DisturbanceCase::None,
            drag: Vector3::new(0.01, 0.01, 0.02),
            probe_force: Vector3::zeros(),
            probe_moment: Vector3::zeros(),
        }
    }
}

impl DisturbanceSpec {
    pub fn of(case: DisturbanceCase) -> Self {
        Self { case, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.drag.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
            return Err(Error::Config("drag coefficients must be non-negative".into()));
        }
        if self.probe_force.iter().chain(self.probe_moment.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Config("probe disturbance must be finite".into()));
        }
        Ok(())
    }
}

/// Body-frame force and moment acting on the vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Disturbance {
    pub force: Vector3<f64>,
    pub moment: Vector3<f64>,
}

impl Disturbance {
    pub fn as_array(&self) -> [f64; 6] {
        [self.force.x, self.force.y, self.force.z, self.moment.x, self.moment.y, self.moment.z]
    }
}

/// `d_Mx(t) = 5e-4 sin(0.75 t) + 6e-4`, N m.
pub fn roll_moment(t: f64) -> f64 {
    5e-4 * (0.75 * t).sin() + 6e-4
}

/// `d_Fy(t) = 0.025 (sin t + 0.5 cos 1.5t + 0.1 t)`, N.
pub fn side_force(t: f64) -> f64 {
    0.025 * (t.sin() + 0.5 * (1.5 * t).cos() + 0.1 * t)
}

/// Disturbance at time `t` and state `x`.
pub fn disturbance(spec: &DisturbanceSpec, t: f64, x: &State) -> Disturbance {
    let mut d = Disturbance::default();
    use DisturbanceCase::*;
    if matches!(spec.case, Case1 | Case2 | Case3) {
        d.moment.x = roll_moment(t);
    }
    if matches!(spec.case, Case2 | Case3 | SideForce) {
        d.force.y = side_force(t);
    }
    if spec.case == Case3 {
        let v_body = x.rotation().transpose() * x.v;
        d.force -= spec.drag.component_mul(&v_body.map(|v| v.signum() * v * v));
    }
    if spec.case == ConstantProbe {
        d.force = spec.probe_force;
        d.moment = spec.probe_moment;
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hover() -> State {
        State::at_rest(Vector3::new(0.0, 0.0, 1.0))
    }

    #[test]
    fn case1_at_zero() {
        let d = disturbance(&DisturbanceSpec::of(DisturbanceCase::Case1), 0.0, &hover());
        assert!((d.moment.x - 6e-4).abs() < 1e-18);
        assert_eq!(d.force, Vector3::zeros());
    }

    #[test]
    fn case2_at_zero() {
        let d = disturbance(&DisturbanceSpec::of(DisturbanceCase::Case2), 0.0, &hover());
        assert!((d.force.y - 0.0125).abs() < 1e-15);
        assert!((d.moment.x - 6e-4).abs() < 1e-18);
    }

    #[test]
    fn case3_drag_vanishes_at_rest_and_opposes_motion() {
        let spec = DisturbanceSpec::of(DisturbanceCase::Case3);
        let d = disturbance(&spec, 0.0, &hover());
        assert_eq!(d.force, Vector3::new(0.0, 0.0125, 0.0));
        let mut x = hover();
        x.v = Vector3::new(2.0, -1.0, 0.5);
        let d = disturbance(&spec, 0.0, &x);
        assert!((d.force.x + 0.04).abs() < 1e-15);
        assert!((d.force.y - (0.0125 + 0.01)).abs() < 1e-15);
        assert!((d.force.z + 0.02 * 0.25).abs() < 1e-15);
    }

    #[test]
    fn side_force_alone_has_no_moment() {
        let d = disturbance(&DisturbanceSpec::of(DisturbanceCase::SideForce), 1.0, &hover());
        assert_eq!(d.moment, Vector3::zeros());
        assert_eq!(d.force.y, side_force(1.0));
    }

    #[test]
    fn negative_drag_rejected() {
        let spec = DisturbanceSpec { drag: Vector3::new(-1.0, 0.0, 0.0), ..Default::default() };
        assert!(spec.validate().is_err());
    }
}
