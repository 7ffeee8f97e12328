//! Knowledge-based neural ODE: the first-principles model plus a small
//! learned residual on the translational and rotational accelerations.

mod mlp;
mod persist;
mod train;

pub use mlp::{
    default_input_scale, residual_eval, residual_grad, residual_input_jacobian, MlpParams,
    NetInput, Residual, ResidualJacobian, NET_INPUT_DIM, NET_OUTPUT_DIM,
};
pub use persist::{load_dataset, load_model, save_dataset, save_model, ModelFile, MODEL_FORMAT_VERSION};
pub use train::{one_step_loss, train_knode, Record, TrainConfig, TrainReport, TrainingDataset};

use nalgebra::{Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    nominal_deriv, nominal_jacobian, ControlInput, Dynamics, InputJacobian, QuadrotorParams,
    State, StateDeriv, StateJacobian, RATE, STATE_DIM, VEL,
};
use crate::error::{Error, Result};

/// Default characteristic torque used to normalize the moment inputs, N m.
pub const DEFAULT_TORQUE_SCALE: f64 = 1e-3;
/// Default output scaling of the acceleration residuals, m/s^2.
pub const DEFAULT_ACCEL_SCALE: f64 = 3.0;
/// Default output scaling of the angular acceleration residuals, rad/s^2.
pub const DEFAULT_RATE_SCALE: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnodeModel {
    /// The controller's believed parameters.
    pub nominal: QuadrotorParams,
    pub theta: MlpParams,
    /// Multiplies the raw network output before it enters the dynamics.
    pub residual_scale: Vector6<f64>,
}

impl KnodeModel {
    /// Fresh model whose output layer is zero, i.e. identical to the nominal model.
    pub fn untrained(nominal: QuadrotorParams, hidden: usize, seed: u64) -> Result<Self> {
        let scale = default_input_scale(nominal.mass * nominal.gravity.z, DEFAULT_TORQUE_SCALE);
        Ok(Self {
            nominal,
            theta: MlpParams::init(hidden, scale, seed)?,
            residual_scale: default_residual_scale(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.nominal.validate()?;
        self.theta.validate()?;
        if self.residual_scale.iter().any(|s| !s.is_finite()) {
            return Err(Error::Format("residual scale must be finite".into()));
        }
        Ok(())
    }

    /// Residual accelerations `(dv, domega)` in physical units.
    pub fn residual(&self, x: &State, u: &ControlInput) -> Residual {
        residual_eval(&self.theta, x, u).component_mul(&self.residual_scale)
    }

    /// `d_theta` restricted to the partial state `z = (v, omega)`; the
    /// residual only has those components.
    pub fn residual_z(&self, x: &State, u: &ControlInput) -> Vector6<f64> {
        self.residual(x, u)
    }
}

pub fn default_residual_scale() -> Vector6<f64> {
    Vector6::new(
        DEFAULT_ACCEL_SCALE,
        DEFAULT_ACCEL_SCALE,
        DEFAULT_ACCEL_SCALE,
        DEFAULT_RATE_SCALE,
        DEFAULT_RATE_SCALE,
        DEFAULT_RATE_SCALE,
    )
}

/// Adds a 6-vector `(dv, domega)` to the velocity and rate slots.
pub(crate) fn add_partial(d: &mut StateDeriv, extra: &Vector6<f64>) {
    let dv = Vector3::new(extra[0], extra[1], extra[2]);
    let dw = Vector3::new(extra[3], extra[4], extra[5]);
    let mut v = d.fixed_rows_mut::<3>(VEL);
    v += dv;
    let mut w = d.fixed_rows_mut::<3>(RATE);
    w += dw;
}

/// `f(x, u) + d_theta(x, u)`; the residual touches only the `v'` and `omega'` slots.
pub fn knode_deriv(model: &KnodeModel, x: &State, u: &ControlInput) -> StateDeriv {
    let mut d = nominal_deriv(x, u, &model.nominal);
    add_partial(&mut d, &model.residual(x, u));
    d
}

impl Dynamics for KnodeModel {
    fn deriv(&self, x: &State, u: &ControlInput) -> StateDeriv {
        knode_deriv(self, x, u)
    }

    fn jacobian(&self, x: &State, u: &ControlInput) -> (StateJacobian, InputJacobian) {
        let (mut fx, mut fu) = nominal_jacobian(x, u, &self.nominal);
        let rj = residual_input_jacobian(&self.theta, x, u);
        for (out_row, state_row) in [VEL, VEL + 1, VEL + 2, RATE, RATE + 1, RATE + 2].iter().enumerate() {
            let s = self.residual_scale[out_row];
            for c in 0..STATE_DIM {
                fx[(*state_row, c)] += s * rj[(out_row, c)];
            }
            for c in 0..4 {
                fu[(*state_row, c)] += s * rj[(out_row, STATE_DIM + c)];
            }
        }
        (fx, fu)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{POS, QUAT};
    use nalgebra::{DMatrix, DVector, Vector4};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model_with_random_output(seed: u64) -> KnodeModel {
        let mut m = KnodeModel::untrained(QuadrotorParams::with_mass(0.03).unwrap(), 16, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        m.theta.w2 = DMatrix::from_fn(6, 16, |_, _| rng.random_range(-0.5..0.5));
        m.theta.b2 = DVector::from_fn(6, |_, _| rng.random_range(-0.5..0.5));
        m
    }

    fn sample() -> (State, ControlInput) {
        let x = State {
            r: Vector3::new(1.0, 2.0, 1.0),
            v: Vector3::new(-0.3, 0.2, 0.1),
            q: Vector4::new(0.98, 0.05, 0.1, -0.1).normalize(),
            omega: Vector3::new(0.3, 0.1, -0.2),
        };
        (x, ControlInput::new(0.31, Vector3::new(2e-4, 0.0, -1e-4)))
    }

    #[test]
    fn untrained_model_equals_nominal_exactly() {
        let m = KnodeModel::untrained(QuadrotorParams::with_mass(0.03).unwrap(), 32, 1).unwrap();
        let (x, u) = sample();
        assert_eq!(knode_deriv(&m, &x, &u), nominal_deriv(&x, &u, &m.nominal));
    }

    #[test]
    fn kinematic_slots_untouched_by_residual() {
        let m = model_with_random_output(4);
        let (x, u) = sample();
        let d = knode_deriv(&m, &x, &u);
        let n = nominal_deriv(&x, &u, &m.nominal);
        assert_eq!(d.fixed_rows::<3>(POS).into_owned(), x.v);
        assert_eq!(d.fixed_rows::<4>(QUAT), n.fixed_rows::<4>(QUAT));
        let qdot = d.fixed_rows::<4>(QUAT).into_owned();
        assert!(x.q.dot(&qdot).abs() < 1e-12);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let m = model_with_random_output(11);
        let (x, u) = sample();
        let (fx, fu) = m.jacobian(&x, &u);
        let xv = x.to_vector();
        for j in 0..STATE_DIM {
            let eps = 1e-6;
            let mut xp = xv;
            let mut xm = xv;
            xp[j] += eps;
            xm[j] -= eps;
            let col = (knode_deriv(&m, &State::from_vector(&xp), &u) - knode_deriv(&m, &State::from_vector(&xm), &u))
                / (2.0 * eps);
            for i in 0..STATE_DIM {
                assert!((col[i] - fx[(i, j)]).abs() < 1e-5 * (1.0 + fx[(i, j)].abs()));
            }
        }
        for j in 0..4 {
            let eps = if j == 0 { 1e-6 } else { 1e-9 };
            let mut up = u.to_vector();
            let mut um = u.to_vector();
            up[j] += eps;
            um[j] -= eps;
            let col = (knode_deriv(&m, &x, &ControlInput::from_vector(&up))
                - knode_deriv(&m, &x, &ControlInput::from_vector(&um)))
                / (2.0 * eps);
            for i in 0..STATE_DIM {
                assert!((col[i] - fu[(i, j)]).abs() < 1e-4 * (1.0 + fu[(i, j)].abs()));
            }
        }
    }
}
