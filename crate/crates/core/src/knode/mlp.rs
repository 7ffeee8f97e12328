use nalgebra::{DMatrix, DVector, SMatrix, SVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlInput, State, INPUT_DIM, STATE_DIM};
use crate::error::{Error, Result};

pub const NET_INPUT_DIM: usize = STATE_DIM + INPUT_DIM;
pub const NET_OUTPUT_DIM: usize = 6;

pub type NetInput = SVector<f64, NET_INPUT_DIM>;
pub type Residual = SVector<f64, NET_OUTPUT_DIM>;
/// d(residual)/d(state, input).
pub type ResidualJacobian = SMatrix<f64, NET_OUTPUT_DIM, NET_INPUT_DIM>;

/// Single-hidden-layer perceptron `y = W2 tanh(W1 (s / input_scale) + b1) + b2`.
///
/// The input is the concatenation of the 13 state and 4 input components,
/// divided element-wise by fixed characteristic magnitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub input_scale: Vec<f64>,
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

fn net_input(x: &State, u: &ControlInput) -> NetInput {
    let mut s = NetInput::zeros();
    s.fixed_rows_mut::<STATE_DIM>(0).copy_from(&x.to_vector());
    s.fixed_rows_mut::<INPUT_DIM>(STATE_DIM).copy_from(&u.to_vector());
    s
}

/// Characteristic magnitudes: 1 for all state components, `hover_thrust` for
/// thrust, `torque_scale` for the moments.
pub fn default_input_scale(hover_thrust: f64, torque_scale: f64) -> Vec<f64> {
    let mut s = vec![1.0; NET_INPUT_DIM];
    s[STATE_DIM] = hover_thrust;
    for v in s.iter_mut().skip(STATE_DIM + 1) {
        *v = torque_scale;
    }
    s
}

impl MlpParams {
    /// Hidden layer uniform in `±1/sqrt(fan_in)`, output layer zero.
    pub fn init(hidden: usize, input_scale: Vec<f64>, seed: u64) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Config("hidden width must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (NET_INPUT_DIM as f64).sqrt();
        let w1 = DMatrix::from_fn(hidden, NET_INPUT_DIM, |_, _| rng.random_range(-bound..bound));
        let b1 = DVector::from_fn(hidden, |_, _| rng.random_range(-bound..bound));
        let p = Self {
            input_scale,
            w1,
            b1,
            w2: DMatrix::zeros(NET_OUTPUT_DIM, hidden),
            b2: DVector::zeros(NET_OUTPUT_DIM),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.b1.len();
        let ok = self.input_scale.len() == NET_INPUT_DIM
            && self.w1.shape() == (h, NET_INPUT_DIM)
            && self.w2.shape() == (NET_OUTPUT_DIM, h)
            && self.b2.len() == NET_OUTPUT_DIM;
        if !ok {
            return Err(Error::Format("inconsistent network shapes".into()));
        }
        let finite = self.w1.iter().chain(self.b1.iter()).chain(self.w2.iter()).chain(self.b2.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Format("non-finite network weights".into()));
        }
        if self.input_scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Format("input scales must be positive".into()));
        }
        Ok(())
    }

    fn scaled(&self, s: &NetInput) -> DVector<f64> {
        DVector::from_iterator(
            NET_INPUT_DIM,
            s.iter().zip(&self.input_scale).map(|(v, k)| v / k),
        )
    }

    fn hidden_activation(&self, scaled: &DVector<f64>) -> DVector<f64> {
        (&self.w1 * scaled + &self.b1).map(f64::tanh)
    }

    pub fn forward(&self, s: &NetInput) -> Residual {
        let hid = self.hidden_activation(&self.scaled(s));
        let y = &self.w2 * hid + &self.b2;
        Residual::from_column_slice(y.as_slice())
    }

    /// Jacobian of the output with respect to the raw (unscaled) input.
    pub fn input_jacobian(&self, s: &NetInput) -> ResidualJacobian {
        let hid = self.hidden_activation(&self.scaled(s));
        let slope = hid.map(|h| 1.0 - h * h);
        let mut inner = self.w1.clone();
        for (mut row, d) in inner.row_iter_mut().zip(slope.iter()) {
            row *= *d;
        }
        for (mut col, k) in inner.column_iter_mut().zip(&self.input_scale) {
            col /= *k;
        }
        let j = &self.w2 * inner;
        ResidualJacobian::from_column_slice(j.as_slice())
    }

    /// Reverse-mode gradient of `adjoint . forward(s)` with respect to all
    /// weights, returned in the same shape as `self` (input scales untouched).
    pub fn backward(&self, s: &NetInput, adjoint: &Residual) -> MlpParams {
        let scaled = self.scaled(s);
        let hid = self.hidden_activation(&scaled);
        let adj = DVector::from_column_slice(adjoint.as_slice());
        let gw2 = &adj * hid.transpose();
        let hbar = self.w2.tr_mul(&adj);
        let abar = hbar.zip_map(&hid, |g, h| g * (1.0 - h * h));
        let gw1 = &abar * scaled.transpose();
        MlpParams {
            input_scale: self.input_scale.clone(),
            w1: gw1,
            b1: abar,
            w2: gw2,
            b2: adj,
        }
    }

    pub fn zeros_like(&self) -> MlpParams {
        MlpParams {
            input_scale: self.input_scale.clone(),
            w1: DMatrix::zeros(self.w1.nrows(), self.w1.ncols()),
            b1: DVector::zeros(self.b1.len()),
            w2: DMatrix::zeros(self.w2.nrows(), self.w2.ncols()),
            b2: DVector::zeros(self.b2.len()),
        }
    }

    /// `self += alpha * other` over the trainable weights.
    pub fn axpy(&mut self, alpha: f64, other: &MlpParams) {
        self.w1 += &other.w1 * alpha;
        self.b1 += &other.b1 * alpha;
        self.w2 += &other.w2 * alpha;
        self.b2 += &other.b2 * alpha;
    }

    pub fn scale(&mut self, alpha: f64) {
        self.w1 *= alpha;
        self.b1 *= alpha;
        self.w2 *= alpha;
        self.b2 *= alpha;
    }

    /// Trainable weights flattened as `w1, b1, w2, b2` (column-major blocks).
    pub fn flat(&self) -> Vec<f64> {
        self.w1.iter().chain(self.b1.iter()).chain(self.w2.iter()).chain(self.b2.iter())
            .copied()
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for v in self.w1.iter_mut().chain(self.b1.iter_mut()).chain(self.w2.iter_mut()).chain(self.b2.iter_mut()) {
            *v = it.next().expect("flat vector too short");
        }
    }

    pub fn num_weights(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|v| v.is_finite())
    }
}

/// Raw network output at `(x, u)`.
pub fn residual_eval(theta: &MlpParams, x: &State, u: &ControlInput) -> Residual {
    theta.forward(&net_input(x, u))
}

/// Gradient of `adjoint . residual_eval(theta, x, u)` with respect to `theta`.
pub fn residual_grad(theta: &MlpParams, x: &State, u: &ControlInput, adjoint: &Residual) -> MlpParams {
    theta.backward(&net_input(x, u), adjoint)
}

/// d(residual_eval)/d(x, u).
pub fn residual_input_jacobian(theta: &MlpParams, x: &State, u: &ControlInput) -> ResidualJacobian {
    theta.input_jacobian(&net_input(x, u))
}
