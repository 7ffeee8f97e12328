//! Rigid-body quadrotor model and the fixed-step integrators shared by the
//! plant, the L1 state predictor and the MPC transcription.
//!
//! State layout (13): position `r`, velocity `v` (inertial, ENU), unit
//! quaternion `q` (scalar first, Hamilton product, body to inertial) and body
//! rate `omega`. Input layout (4): collective thrust followed by body moments.
//!
//! ```text
//! r' = v
//! m v' = -m g + R(q) e3 eta
//! J w' = tau - w x J w
//! q' = 1/2 Omega(w) q
//! ```

use nalgebra::{Matrix3, Matrix4, SMatrix, SVector, Vector3, Vector4, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STATE_DIM: usize = 13;
pub const INPUT_DIM: usize = 4;
pub const GRAVITY: f64 = 9.81;

/// Offsets of each block inside the 13-vector.
pub const POS: usize = 0;
pub const VEL: usize = 3;
pub const QUAT: usize = 6;
pub const RATE: usize = 10;

pub type StateVec = SVector<f64, STATE_DIM>;
pub type InputVec = SVector<f64, INPUT_DIM>;
/// Time derivative of a [`State`], same layout as [`StateVec`].
pub type StateDeriv = StateVec;
pub type StateJacobian = SMatrix<f64, STATE_DIM, STATE_DIM>;
pub type InputJacobian = SMatrix<f64, STATE_DIM, INPUT_DIM>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub r: Vector3<f64>,
    pub v: Vector3<f64>,
    /// `(w, x, y, z)`.
    pub q: Vector4<f64>,
    pub omega: Vector3<f64>,
}

impl State {
    /// At rest with identity attitude.
    pub fn at_rest(r: Vector3<f64>) -> Self {
        Self {
            r,
            v: Vector3::zeros(),
            q: Vector4::new(1.0, 0.0, 0.0, 0.0),
            omega: Vector3::zeros(),
        }
    }

    pub fn to_vector(&self) -> StateVec {
        let mut out = StateVec::zeros();
        out.fixed_rows_mut::<3>(POS).copy_from(&self.r);
        out.fixed_rows_mut::<3>(VEL).copy_from(&self.v);
        out.fixed_rows_mut::<4>(QUAT).copy_from(&self.q);
        out.fixed_rows_mut::<3>(RATE).copy_from(&self.omega);
        out
    }

    pub fn from_vector(x: &StateVec) -> Self {
        Self {
            r: x.fixed_rows::<3>(POS).into_owned(),
            v: x.fixed_rows::<3>(VEL).into_owned(),
            q: x.fixed_rows::<4>(QUAT).into_owned(),
            omega: x.fixed_rows::<3>(RATE).into_owned(),
        }
    }

    /// Partial state `z = (v, omega)` used by the L1 predictor.
    pub fn partial(&self) -> Vector6<f64> {
        Vector6::new(
            self.v.x,
            self.v.y,
            self.v.z,
            self.omega.x,
            self.omega.y,
            self.omega.z,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|c| c.is_finite())
    }

    /// Body-to-inertial rotation. Does not check the quaternion norm.
    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_unchecked(&self.q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    /// Collective thrust, N.
    pub thrust: f64,
    /// Body moments, N m.
    pub torque: Vector3<f64>,
}

impl ControlInput {
    pub fn new(thrust: f64, torque: Vector3<f64>) -> Self {
        Self { thrust, torque }
    }

    pub fn zero() -> Self {
        Self::new(0.0, Vector3::zeros())
    }

    pub fn hover(mass: f64) -> Self {
        Self::new(mass * GRAVITY, Vector3::zeros())
    }

    pub fn to_vector(&self) -> InputVec {
        InputVec::new(self.thrust, self.torque.x, self.torque.y, self.torque.z)
    }

    pub fn from_vector(u: &InputVec) -> Self {
        Self::new(u[0], Vector3::new(u[1], u[2], u[3]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadrotorParams {
    /// kg
    pub mass: f64,
    /// Principal moments of inertia, kg m^2.
    pub inertia: Vector3<f64>,
    /// Gravity, subtracted from the translational dynamics; `(0, 0, 9.81)` in ENU.
    pub gravity: Vector3<f64>,
}

impl QuadrotorParams {
    pub const DEFAULT_INERTIA: [f64; 3] = [1.43e-5, 1.43e-5, 2.89e-5];

    pub fn new(mass: f64, inertia: Vector3<f64>) -> Result<Self> {
        let p = Self {
            mass,
            inertia,
            gravity: Vector3::new(0.0, 0.0, GRAVITY),
        };
        p.validate()?;
        Ok(p)
    }

    /// Crazyflie-scale inertia with the given mass.
    pub fn with_mass(mass: f64) -> Result<Self> {
        Self::new(mass, Vector3::from(Self::DEFAULT_INERTIA))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return Err(Error::Config(format!("mass must be positive, got {}", self.mass)));
        }
        if self.inertia.iter().any(|j| !(*j > 0.0 && j.is_finite())) {
            return Err(Error::Config(format!(
                "inertia diagonal must be positive, got {:?}",
                self.inertia.as_slice()
            )));
        }
        if self.gravity.iter().any(|g| !g.is_finite()) {
            return Err(Error::Config("gravity must be finite".into()));
        }
        Ok(())
    }

    pub fn inertia_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&self.inertia)
    }

    pub fn hover_input(&self) -> ControlInput {
        ControlInput::new(self.mass * self.gravity.z, Vector3::zeros())
    }
}

/// The 4x4 matrix `Omega(w)` with `q' = 1/2 Omega q`.
pub fn omega_matrix(omega: &Vector3<f64>) -> Matrix4<f64> {
    let (wx, wy, wz) = (omega.x, omega.y, omega.z);
    Matrix4::new(
        0.0, -wx, -wy, -wz, //
        wx, 0.0, wz, -wy, //
        wy, -wz, 0.0, wx, //
        wz, wy, -wx, 0.0,
    )
}

/// Body-to-inertial rotation matrix of a unit quaternion.
pub fn rotation_from_quat(q: &Vector4<f64>) -> Result<Matrix3<f64>> {
    let n = q.norm();
    if !n.is_finite() || (n - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidState(format!("quaternion norm {n} is not 1")));
    }
    Ok(rotation_unchecked(q))
}

pub(crate) fn rotation_unchecked(q: &Vector4<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// d(R(q) e3)/dq, 3x4.
fn body_z_quat_jacobian(q: &Vector4<f64>) -> SMatrix<f64, 3, 4> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    SMatrix::<f64, 3, 4>::new(
        2.0 * y, 2.0 * z, 2.0 * w, 2.0 * x, //
        -2.0 * x, -2.0 * w, 2.0 * z, 2.0 * y, //
        0.0, -4.0 * x, -4.0 * y, 0.0,
    )
}

/// d(Omega(w) q)/dw, 4x3.
fn quat_rate_jacobian(q: &Vector4<f64>) -> SMatrix<f64, 4, 3> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    SMatrix::<f64, 4, 3>::new(
        -x, -y, -z, //
        w, -z, y, //
        z, w, -x, //
        -y, x, w,
    )
}

pub(crate) fn skew(a: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

/// First-principles dynamics.
pub fn nominal_deriv(x: &State, u: &ControlInput, p: &QuadrotorParams) -> StateDeriv {
    let rot = rotation_unchecked(&x.q);
    let v_dot = -p.gravity + rot.column(2) * (u.thrust / p.mass);
    let j_omega = p.inertia.component_mul(&x.omega);
    let omega_dot = (u.torque - x.omega.cross(&j_omega)).component_div(&p.inertia);
    let q_dot = 0.5 * omega_matrix(&x.omega) * x.q;

    let mut d = StateDeriv::zeros();
    d.fixed_rows_mut::<3>(POS).copy_from(&x.v);
    d.fixed_rows_mut::<3>(VEL).copy_from(&v_dot);
    d.fixed_rows_mut::<4>(QUAT).copy_from(&q_dot);
    d.fixed_rows_mut::<3>(RATE).copy_from(&omega_dot);
    d
}

/// Analytic Jacobians of [`nominal_deriv`] with respect to state and input.
pub fn nominal_jacobian(
    x: &State,
    u: &ControlInput,
    p: &QuadrotorParams,
) -> (StateJacobian, InputJacobian) {
    let mut fx = StateJacobian::zeros();
    let mut fu = InputJacobian::zeros();

    fx.fixed_view_mut::<3, 3>(POS, VEL)
        .copy_from(&Matrix3::identity());

    let inv_m = 1.0 / p.mass;
    fx.fixed_view_mut::<3, 4>(VEL, QUAT)
        .copy_from(&(body_z_quat_jacobian(&x.q) * (u.thrust * inv_m)));
    fu.fixed_view_mut::<3, 1>(VEL, 0)
        .copy_from(&(rotation_unchecked(&x.q).column(2) * inv_m));

    fx.fixed_view_mut::<4, 4>(QUAT, QUAT)
        .copy_from(&(0.5 * omega_matrix(&x.omega)));
    fx.fixed_view_mut::<4, 3>(QUAT, RATE)
        .copy_from(&(0.5 * quat_rate_jacobian(&x.q)));

    let j = p.inertia_matrix();
    let j_inv = Matrix3::from_diagonal(&p.inertia.map(|v| 1.0 / v));
    let j_omega = j * x.omega;
    let d_gyro = skew(&x.omega) * j - skew(&j_omega);
    fx.fixed_view_mut::<3, 3>(RATE, RATE)
        .copy_from(&(-j_inv * d_gyro));
    fu.fixed_view_mut::<3, 3>(RATE, 1).copy_from(&j_inv);

    (fx, fu)
}

/// A continuous-time model `x' = f(x, u)` with an analytic Jacobian.
pub trait Dynamics {
    fn deriv(&self, x: &State, u: &ControlInput) -> StateDeriv;
    fn jacobian(&self, x: &State, u: &ControlInput) -> (StateJacobian, InputJacobian);
}

impl Dynamics for QuadrotorParams {
    fn deriv(&self, x: &State, u: &ControlInput) -> StateDeriv {
        nominal_deriv(x, u, self)
    }

    fn jacobian(&self, x: &State, u: &ControlInput) -> (StateJacobian, InputJacobian) {
        nominal_jacobian(x, u, self)
    }
}

impl<D: Dynamics + ?Sized> Dynamics for &D {
    fn deriv(&self, x: &State, u: &ControlInput) -> StateDeriv {
        (**self).deriv(x, u)
    }

    fn jacobian(&self, x: &State, u: &ControlInput) -> (StateJacobian, InputJacobian) {
        (**self).jacobian(x, u)
    }
}

/// Rescale the quaternion to unit norm.
pub fn normalize_quat(x: &State) -> Result<State> {
    let n = x.q.norm();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::InvalidState(format!("cannot normalize quaternion of norm {n}")));
    }
    Ok(State { q: x.q / n, ..*x })
}

/// Classical RK4 step for a time-dependent vector field.
pub fn rk4<const D: usize, F>(mut f: F, t: f64, y: &SVector<f64, D>, h: f64) -> SVector<f64, D>
where
    F: FnMut(f64, &SVector<f64, D>) -> SVector<f64, D>,
{
    let k1 = f(t, y);
    let k2 = f(t + 0.5 * h, &(y + k1 * (0.5 * h)));
    let k3 = f(t + 0.5 * h, &(y + k2 * (0.5 * h)));
    let k4 = f(t + h, &(y + k3 * h));
    y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

// Dormand-Prince stage coefficients; only the fifth-order solution is used.
const DP_C: [f64; 6] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0];
const DP_A: [[f64; 5]; 6] = [
    [0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
];
const DP_B: [f64; 6] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
];

/// Explicit fifth-order Runge-Kutta step (Dormand-Prince weights, fixed step).
pub fn rk5<const D: usize, F>(mut f: F, t: f64, y: &SVector<f64, D>, h: f64) -> SVector<f64, D>
where
    F: FnMut(f64, &SVector<f64, D>) -> SVector<f64, D>,
{
    let mut k = [SVector::<f64, D>::zeros(); 6];
    for s in 0..6 {
        let mut ys = *y;
        for (j, kj) in k.iter().enumerate().take(s) {
            ys += kj * (DP_A[s][j] * h);
        }
        k[s] = f(t + DP_C[s] * h, &ys);
    }
    let mut out = *y;
    for (b, ks) in DP_B.iter().zip(k.iter()) {
        out += ks * (b * h);
    }
    out
}

fn check_step(h: f64) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Precondition(format!("step size must be positive, got {h}")));
    }
    Ok(())
}

fn finish_state(y: &StateVec) -> Result<State> {
    if y.iter().any(|c| !c.is_finite()) {
        return Err(Error::Divergence("non-finite state after integration step".into()));
    }
    normalize_quat(&State::from_vector(y))
}

/// One RK4 step of `f` with the input held constant, followed by quaternion
/// renormalization.
pub fn rk4_step<F>(f: F, x: &State, u: &ControlInput, h: f64) -> Result<State>
where
    F: Fn(&State, &ControlInput) -> StateDeriv,
{
    check_step(h)?;
    let y = rk4(|_, y| f(&State::from_vector(y), u), 0.0, &x.to_vector(), h);
    finish_state(&y)
}

/// One fifth-order step of a time-dependent field for the full state, with
/// quaternion renormalization. `t` is the time at the start of the step.
pub fn rk5_state_step<F>(f: F, t: f64, x: &State, h: f64) -> Result<State>
where
    F: Fn(f64, &State) -> StateDeriv,
{
    check_step(h)?;
    let y = rk5(|t, y| f(t, &State::from_vector(y)), t, &x.to_vector(), h);
    finish_state(&y)
}

/// One fifth-order step for an arbitrary partial state.
pub fn rk5_step<const D: usize, F>(f: F, t: f64, z: &SVector<f64, D>, h: f64) -> Result<SVector<f64, D>>
where
    F: FnMut(f64, &SVector<f64, D>) -> SVector<f64, D>,
{
    check_step(h)?;
    let out = rk5(f, t, z, h);
    if out.iter().any(|c| !c.is_finite()) {
        return Err(Error::Divergence("non-finite partial state after integration step".into()));
    }
    Ok(out)
}

/// Jacobian of `q / |q|`.
fn normalization_jacobian(q: &Vector4<f64>) -> Matrix4<f64> {
    let n = q.norm();
    let unit = q / n;
    (Matrix4::identity() - unit * unit.transpose()) / n
}

/// RK4 step with renormalization together with its sensitivities
/// `(dx+/dx, dx+/du)`, propagated through every stage.
pub fn rk4_step_with_jacobian<M: Dynamics + ?Sized>(
    model: &M,
    x: &StateVec,
    u: &ControlInput,
    h: f64,
) -> (StateVec, StateJacobian, InputJacobian) {
    let eye = StateJacobian::identity();
    let eval = |y: &StateVec| {
        let s = State::from_vector(y);
        let d = model.deriv(&s, u);
        let (fx, fu) = model.jacobian(&s, u);
        (d, fx, fu)
    };

    let (k1, a1, b1) = eval(x);
    let dk1_dx = a1;
    let dk1_du = b1;

    let y2 = x + k1 * (0.5 * h);
    let (k2, a2, b2) = eval(&y2);
    let dk2_dx = a2 * (eye + dk1_dx * (0.5 * h));
    let dk2_du = a2 * (dk1_du * (0.5 * h)) + b2;

    let y3 = x + k2 * (0.5 * h);
    let (k3, a3, b3) = eval(&y3);
    let dk3_dx = a3 * (eye + dk2_dx * (0.5 * h));
    let dk3_du = a3 * (dk2_du * (0.5 * h)) + b3;

    let y4 = x + k3 * h;
    let (k4, a4, b4) = eval(&y4);
    let dk4_dx = a4 * (eye + dk3_dx * h);
    let dk4_du = a4 * (dk3_du * h) + b4;

    let w = h / 6.0;
    let mut y = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * w;
    let mut jx = eye + (dk1_dx + dk2_dx * 2.0 + dk3_dx * 2.0 + dk4_dx) * w;
    let mut ju = (dk1_du + dk2_du * 2.0 + dk3_du * 2.0 + dk4_du) * w;

    let q = y.fixed_rows::<4>(QUAT).into_owned();
    let nj = normalization_jacobian(&q);
    y.fixed_rows_mut::<4>(QUAT).copy_from(&(q / q.norm()));
    let jx_q = nj * jx.fixed_rows::<4>(QUAT);
    jx.fixed_rows_mut::<4>(QUAT).copy_from(&jx_q);
    let ju_q = nj * ju.fixed_rows::<4>(QUAT);
    ju.fixed_rows_mut::<4>(QUAT).copy_from(&ju_q);

    (y, jx, ju)
}
