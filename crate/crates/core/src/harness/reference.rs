use std::f64::consts::PI;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dynamics::State;
use crate::error::{Error, Result};
use crate::mpc::ReferenceWindow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Circle,
    Lemniscate,
    Hover,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Lemniscate => "lemniscate",
            Shape::Hover => "hover",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryProfile {
    pub shape: Shape,
    /// m
    pub radius: f64,
    /// m/s
    pub speed: f64,
    /// m
    pub altitude: f64,
    /// s
    pub duration: f64,
}

impl Default for TrajectoryProfile {
    fn default() -> Self {
        Self {
            shape: Shape::Circle,
            radius: 3.0,
            speed: 1.0,
            altitude: 1.0,
            duration: 15.0,
        }
    }
}

impl TrajectoryProfile {
    pub fn validate(&self) -> Result<()> {
        if self.shape != Shape::Hover && !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::Config("profile radius must be positive".into()));
        }
        if !(self.speed > 0.0 && self.speed.is_finite()) {
            return Err(Error::Config("profile speed must be positive".into()));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) || !self.altitude.is_finite() {
            return Err(Error::Config("profile duration must be positive and altitude finite".into()));
        }
        Ok(())
    }
}

/// Arc length of one lap of the unit Gerono lemniscate `(sin s, sin s cos s)`.
fn unit_lemniscate_length() -> f64 {
    let n = 20_000;
    let h = 2.0 * PI / n as f64;
    let speed = |s: f64| (s.cos().powi(2) + (2.0 * s).cos().powi(2)).sqrt();
    let mut sum = speed(0.0) + speed(2.0 * PI);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * speed(i as f64 * h);
    }
    sum * h / 3.0
}

/// A profile with its angular rate resolved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reference {
    pub profile: TrajectoryProfile,
    /// Angular rate of the parameterization, rad/s.
    pub rate: f64,
}

impl Reference {
    pub fn new(profile: TrajectoryProfile) -> Result<Self> {
        profile.validate()?;
        let rate = match profile.shape {
            Shape::Circle => profile.speed / profile.radius,
            Shape::Lemniscate => 2.0 * PI * profile.speed / (profile.radius * unit_lemniscate_length()),
            Shape::Hover => 0.0,
        };
        Ok(Self { profile, rate })
    }

    /// Reference state at time `t`; identity attitude and zero rates. Times
    /// past the duration continue along the analytic path.
    pub fn state(&self, t: f64) -> State {
        let p = &self.profile;
        let (r, a, h) = (p.radius, self.rate, p.altitude);
        let (pos, vel) = match p.shape {
            Shape::Circle => (
                Vector3::new(r * (a * t).cos(), r * (a * t).sin(), h),
                Vector3::new(-r * a * (a * t).sin(), r * a * (a * t).cos(), 0.0),
            ),
            Shape::Lemniscate => (
                Vector3::new(r * (a * t).sin(), 0.5 * r * (2.0 * a * t).sin(), h),
                Vector3::new(r * a * (a * t).cos(), r * a * (2.0 * a * t).cos(), 0.0),
            ),
            Shape::Hover => (Vector3::new(0.0, 0.0, h), Vector3::zeros()),
        };
        let mut s = State::at_rest(pos);
        s.v = vel;
        s
    }

    pub fn window(&self, t0: f64, horizon: usize, dt: f64) -> Result<ReferenceWindow> {
        ReferenceWindow::new((0..=horizon).map(|i| self.state(t0 + i as f64 * dt)).collect())
    }
}

/// Reference state of `profile` at `t`, for `0 <= t <= duration`.
pub fn reference_state(profile: &TrajectoryProfile, t: f64) -> Result<State> {
    if !(0.0..=profile.duration).contains(&t) {
        return Err(Error::Precondition(format!("time {t} outside [0, {}]", profile.duration)));
    }
    Ok(Reference::new(*profile)?.state(t))
}
