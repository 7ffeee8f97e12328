//! L1 adaptive estimation: uncertainty input geometry, state predictor,
//! piecewise-constant adaptation law and the discrete low-pass filter.
//!
//! The partial state is `z = (v, omega)`. The uncertainty vector is
//! `sigma = (sigma_m, sigma_um)` with `sigma_m = (body-z force, three body
//! moments)` and `sigma_um = (body-x force, body-y force)`, all in N and N m.

use nalgebra::{Matrix3, Matrix6, SMatrix, Vector3, Vector4, Vector6};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    rk5_step, ControlInput, Dynamics, InputJacobian, QuadrotorParams, State, StateDeriv,
    StateJacobian,
};
use crate::error::{Error, Result};
use crate::knode::add_partial;

/// Per-axis filter bandwidths used on hardware, rad/s (x, y, z).
pub const HARDWARE_AXIS_CUTOFFS: [f64; 3] = [0.125, 0.125, 0.75];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct L1Config {
    /// Diagonal of the Hurwitz matrix `A`; every entry must be negative.
    pub a_diag: Vector6<f64>,
    /// Adaptation sampling period `T`, s.
    pub period: f64,
    /// Filter cut-off per matched channel (thrust, three moments), rad/s.
    pub cutoff: Vector4<f64>,
    /// Pass `-sigma_m` straight through instead of filtering.
    pub identity_filter: bool,
}

impl Default for L1Config {
    /// Identity filter; `cutoff` holds the hardware bandwidths for when the
    /// filter is switched on.
    fn default() -> Self {
        let [cx, cy, cz] = HARDWARE_AXIS_CUTOFFS;
        Self {
            a_diag: Vector6::repeat(-1.0),
            period: 0.01,
            cutoff: Vector4::new(cz, cx, cy, cz),
            identity_filter: true,
        }
    }
}

impl L1Config {
    /// `A = -2I` with the hardware bandwidths: the z-axis cut-off on the
    /// thrust channel, x/y cut-offs on roll/pitch moments, z on yaw.
    pub fn hardware_preset(period: f64) -> Self {
        let [cx, cy, cz] = HARDWARE_AXIS_CUTOFFS;
        Self {
            a_diag: Vector6::repeat(-2.0),
            period,
            cutoff: Vector4::new(cz, cx, cy, cz),
            identity_filter: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.a_diag.iter().any(|a| !(*a < 0.0 && a.is_finite())) {
            return Err(Error::Config("L1 matrix A must have negative diagonal".into()));
        }
        if !(self.period > 0.0 && self.period.is_finite()) {
            return Err(Error::Config("L1 period must be positive".into()));
        }
        if !self.identity_filter && self.cutoff.iter().any(|g| !(*g >= 0.0) || g.is_nan()) {
            return Err(Error::Config("filter cut-offs must be non-negative".into()));
        }
        Ok(())
    }

    /// Scalar gains `a e^{aT} / (e^{aT} - 1)` of the adaptation law.
    pub fn adaptation_gains(&self) -> Vector6<f64> {
        self.a_diag.map(|a| {
            let e = (a * self.period).exp();
            a * e / (e - 1.0)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct L1State {
    pub z_hat: Vector6<f64>,
    pub sigma_hat: Vector6<f64>,
    /// Previous filter output `u_L1`.
    pub u_l1: Vector4<f64>,
}

impl L1State {
    /// `z_hat <- z`, zero estimate, zero filter memory.
    pub fn new(z: Vector6<f64>) -> Self {
        Self {
            z_hat: z,
            sigma_hat: Vector6::zeros(),
            u_l1: Vector4::zeros(),
        }
    }

    pub fn sigma_m(&self) -> Vector4<f64> {
        self.sigma_hat.fixed_rows::<4>(0).into_owned()
    }

    pub fn sigma_um(&self) -> nalgebra::Vector2<f64> {
        self.sigma_hat.fixed_rows::<2>(4).into_owned()
    }
}

/// Residual accelerations implied by an uncertainty estimate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UncertaintyAccels {
    /// Translational, inertial frame, m/s^2.
    pub f_sigma: Vector3<f64>,
    /// Rotational, rad/s^2.
    pub m_sigma: Vector3<f64>,
}

impl UncertaintyAccels {
    pub fn as_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.f_sigma.x,
            self.f_sigma.y,
            self.f_sigma.z,
            self.m_sigma.x,
            self.m_sigma.y,
            self.m_sigma.z,
        )
    }
}

/// Uncertainty input matrices at one attitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintyGeometry {
    pub g1: SMatrix<f64, 6, 4>,
    pub g2: SMatrix<f64, 6, 2>,
    pub g: Matrix6<f64>,
    rot: Matrix3<f64>,
    mass: f64,
    inertia: Vector3<f64>,
}

impl UncertaintyGeometry {
    /// `G^{-1} w` using the block structure: the velocity rows invert to
    /// `m R^T` (permuted to thrust, x, y) and the rate rows to `J`.
    pub fn apply_inverse(&self, w: &Vector6<f64>) -> Vector6<f64> {
        let body = self.rot.transpose() * Vector3::new(w[0], w[1], w[2]) * self.mass;
        let moments = self.inertia.component_mul(&Vector3::new(w[3], w[4], w[5]));
        Vector6::new(body.z, moments.x, moments.y, moments.z, body.x, body.y)
    }

    pub fn inverse(&self) -> Matrix6<f64> {
        let mut inv = Matrix6::zeros();
        for j in 0..6 {
            inv.set_column(j, &self.apply_inverse(&Vector6::ith(j, 1.0)));
        }
        inv
    }
}

/// `G1 = [(1/m) R e3, 0; 0, J^-1]`, `G2 = [(1/m) R e1, (1/m) R e2; 0, 0]`.
pub fn build_g(x: &State, p: &QuadrotorParams) -> UncertaintyGeometry {
    let rot = x.rotation();
    let inv_m = 1.0 / p.mass;
    let mut g1 = SMatrix::<f64, 6, 4>::zeros();
    g1.fixed_view_mut::<3, 1>(0, 0).copy_from(&(rot.column(2) * inv_m));
    for i in 0..3 {
        g1[(3 + i, 1 + i)] = 1.0 / p.inertia[i];
    }
    let mut g2 = SMatrix::<f64, 6, 2>::zeros();
    g2.fixed_view_mut::<3, 1>(0, 0).copy_from(&(rot.column(0) * inv_m));
    g2.fixed_view_mut::<3, 1>(0, 1).copy_from(&(rot.column(1) * inv_m));
    let mut g = Matrix6::zeros();
    g.fixed_view_mut::<6, 4>(0, 0).copy_from(&g1);
    g.fixed_view_mut::<6, 2>(0, 4).copy_from(&g2);
    UncertaintyGeometry {
        g1,
        g2,
        g,
        rot,
        mass: p.mass,
        inertia: p.inertia,
    }
}

/// Advance the predictor by one period `T` with `x`, `u_bar` and the current
/// estimate held constant:
///
/// ```text
/// z_hat' = [-g; -J^-1 (w x J w)] + d_theta_z + G1 u_bar + G sigma_hat + A (z_hat - z)
/// ```
pub fn predictor_step(
    l1: &L1State,
    x: &State,
    u_bar: &ControlInput,
    d_theta_z: &Vector6<f64>,
    p: &QuadrotorParams,
    cfg: &L1Config,
) -> Result<Vector6<f64>> {
    let geom = build_g(x, p);
    let j_omega = p.inertia.component_mul(&x.omega);
    let gyro = -x.omega.cross(&j_omega).component_div(&p.inertia);
    let drift = Vector6::new(-p.gravity.x, -p.gravity.y, -p.gravity.z, gyro.x, gyro.y, gyro.z);
    let forcing = drift + d_theta_z + geom.g1 * u_bar.to_vector() + geom.g * l1.sigma_hat;
    let z = x.partial();
    let a = cfg.a_diag;
    rk5_step(
        |_, z_hat| forcing + a.component_mul(&(z_hat - z)),
        0.0,
        &l1.z_hat,
        cfg.period,
    )
}

/// `sigma_hat = G^-1 (e^{AT} - I)^-1 A e^{AT} (z - z_hat)`, element-wise for diagonal `A`.
pub fn adaptation_update(
    z: &Vector6<f64>,
    z_hat: &Vector6<f64>,
    geom: &UncertaintyGeometry,
    cfg: &L1Config,
) -> Vector6<f64> {
    let err = z - z_hat;
    geom.apply_inverse(&cfg.adaptation_gains().component_mul(&err))
}

/// `u_i = (u_prev_i + sigma_m_i) e^{-gamma_i T} - sigma_m_i`.
pub fn lpf_step(u_prev: &Vector4<f64>, sigma_m: &Vector4<f64>, cfg: &L1Config) -> Vector4<f64> {
    if cfg.identity_filter {
        return -sigma_m;
    }
    Vector4::from_fn(|i, _| {
        let decay = (-cfg.cutoff[i] * cfg.period).exp();
        (u_prev[i] + sigma_m[i]) * decay - sigma_m[i]
    })
}

/// `(f_sigma; m_sigma) = G sigma_hat`.
pub fn uncertainty_to_accels(geom: &UncertaintyGeometry, sigma_hat: &Vector6<f64>) -> UncertaintyAccels {
    let w = geom.g * sigma_hat;
    UncertaintyAccels {
        f_sigma: Vector3::new(w[0], w[1], w[2]),
        m_sigma: Vector3::new(w[3], w[4], w[5]),
    }
}

/// A model with frozen residual accelerations added to its `v'` and
/// `omega'` slots.
#[derive(Debug, Clone, Copy)]
pub struct AugmentedModel<'a, M: ?Sized> {
    pub base: &'a M,
    pub accels: UncertaintyAccels,
}

pub fn augment_deriv<M: Dynamics + ?Sized>(model: &M, accels: UncertaintyAccels) -> AugmentedModel<'_, M> {
    AugmentedModel { base: model, accels }
}

impl<M: Dynamics + ?Sized> Dynamics for AugmentedModel<'_, M> {
    fn deriv(&self, x: &State, u: &ControlInput) -> StateDeriv {
        let mut d = self.base.deriv(x, u);
        add_partial(&mut d, &self.accels.as_vector());
        d
    }

    fn jacobian(&self, x: &State, u: &ControlInput) -> (StateJacobian, InputJacobian) {
        self.base.jacobian(x, u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{nominal_deriv, VEL};
    use crate::knode::{knode_deriv, KnodeModel};
    use approx::assert_relative_eq;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params() -> QuadrotorParams {
        QuadrotorParams::with_mass(0.04).unwrap()
    }

    fn random_attitude(rng: &mut ChaCha8Rng) -> State {
        let mut x = State::at_rest(Vector3::zeros());
        x.q = Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
        x.omega = Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0));
        x.v = Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0));
        x
    }

    #[test]
    fn thrust_column_at_identity_attitude() {
        let g = build_g(&State::at_rest(Vector3::zeros()), &params());
        assert_relative_eq!(
            g.g1.fixed_view::<3, 1>(0, 0).into_owned(),
            Vector3::new(0.0, 0.0, 25.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn g_is_invertible_with_closed_form_inverse() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut conds = Vec::new();
        for _ in 0..50 {
            let x = random_attitude(&mut rng);
            let geom = build_g(&x, &p);
            let prod = geom.g * geom.inverse();
            // the rate block is ~7e4, so compare with a scale-aware tolerance
            assert_relative_eq!(prod, Matrix6::identity(), epsilon = 1e-10);
            let general = geom.g.try_inverse().unwrap();
            assert_relative_eq!(general, geom.inverse(), max_relative = 1e-9, epsilon = 1e-12);
            let inv = geom.inverse();
            let mrt = x.rotation().transpose() * p.mass;
            for (row, src) in [(0usize, 2usize), (4, 0), (5, 1)] {
                for c in 0..3 {
                    assert_relative_eq!(inv[(row, c)], mrt[(src, c)], epsilon = 1e-15);
                }
            }
            for i in 0..3 {
                assert_relative_eq!(inv[(1 + i, 3 + i)], p.inertia[i]);
            }
            let sv = geom.g.singular_values();
            conds.push(sv.max() / sv.min());
        }
        let first = conds[0];
        assert!(conds.iter().all(|c| (c - first).abs() < 1e-6 * first));
    }

    #[test]
    fn decomposition_matches_full_g() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_attitude(&mut rng);
        let geom = build_g(&x, &p);
        let sigma = Vector6::new(0.1, 1e-4, -2e-4, 3e-4, -0.05, 0.02);
        let split = geom.g1 * sigma.fixed_rows::<4>(0) + geom.g2 * sigma.fixed_rows::<2>(4);
        assert_relative_eq!(split, geom.g * sigma, epsilon = 1e-12);
    }

    #[test]
    fn adaptation_gain_for_two_millisecond_period() {
        let cfg = L1Config { period: 0.002, ..Default::default() };
        let mu = cfg.adaptation_gains()[0];
        let expected = (-0.002f64).exp() / (1.0 - (-0.002f64).exp());
        assert_relative_eq!(mu, expected, max_relative = 1e-12);
        assert!((mu - 499.5).abs() < 1e-3);
        let z = Vector6::new(0.1, 0.2, 0.3, 0.4, 0.5, 0.6);
        let geom = build_g(&State::at_rest(Vector3::zeros()), &params());
        assert_eq!(adaptation_update(&z, &z, &geom, &cfg), Vector6::zeros());
    }

    #[test]
    fn predictor_tracks_plant_at_equilibrium() {
        let p = params();
        let cfg = L1Config::default();
        let x = State::at_rest(Vector3::new(0.0, 0.0, 1.0));
        let l1 = L1State::new(x.partial());
        let z_hat = predictor_step(&l1, &x, &p.hover_input(), &Vector6::zeros(), &p, &cfg).unwrap();
        assert!((z_hat - x.partial()).norm() < 1e-12);
    }

    #[test]
    fn prediction_error_decays_exponentially() {
        let p = params();
        let cfg = L1Config::default();
        let x = State::at_rest(Vector3::new(0.0, 0.0, 1.0));
        let e = Vector6::new(0.3, -0.2, 0.1, 0.5, -0.4, 0.2);
        let mut l1 = L1State::new(x.partial() + e);
        for k in 1..=5 {
            l1.z_hat = predictor_step(&l1, &x, &p.hover_input(), &Vector6::zeros(), &p, &cfg).unwrap();
            let expected = e * (-(k as f64) * cfg.period).exp();
            assert_relative_eq!(l1.z_hat - x.partial(), expected, epsilon = 1e-13);
        }
    }

    #[test]
    fn filter_examples() {
        let sigma = Vector4::new(0.1, -2e-4, 3e-4, 1e-5);
        let mut cfg = L1Config {
            identity_filter: false,
            cutoff: Vector4::repeat(5.0),
            ..Default::default()
        };
        let mut u = Vector4::zeros();
        for _ in 0..5000 {
            u = lpf_step(&u, &sigma, &cfg);
        }
        assert_relative_eq!(u, -sigma, epsilon = 1e-15);

        cfg.cutoff = Vector4::zeros();
        let prev = Vector4::new(1.0, 2.0, 3.0, 4.0);
        assert_relative_eq!(lpf_step(&prev, &sigma, &cfg), prev, epsilon = 1e-15);

        cfg.identity_filter = true;
        assert_eq!(lpf_step(&prev, &sigma, &cfg), -sigma);
    }

    #[test]
    fn accels_examples() {
        let p = params();
        let geom = build_g(&State::at_rest(Vector3::zeros()), &p);
        assert_eq!(uncertainty_to_accels(&geom, &Vector6::zeros()), UncertaintyAccels::default());
        let a = uncertainty_to_accels(&geom, &Vector6::new(0.0, 0.0, 0.0, 0.0, 0.02, -0.01));
        assert_relative_eq!(a.f_sigma, Vector3::new(0.02 / 0.04, -0.01 / 0.04, 0.0), epsilon = 1e-15);
        assert_eq!(a.m_sigma, Vector3::zeros());
    }

    #[test]
    fn accels_round_trip_through_adaptation() {
        let p = params();
        let cfg = L1Config::default();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let x = random_attitude(&mut rng);
            let geom = build_g(&x, &p);
            let z = Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let z_hat = Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let sigma = adaptation_update(&z, &z_hat, &geom, &cfg);
            let back = uncertainty_to_accels(&geom, &sigma).as_vector();
            let pre = cfg.adaptation_gains().component_mul(&(z - z_hat));
            assert_relative_eq!(back, pre, epsilon = 1e-10, max_relative = 1e-12);
        }
    }

    #[test]
    fn augmentation_is_additive() {
        let model = KnodeModel::untrained(QuadrotorParams::with_mass(0.03).unwrap(), 4, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_attitude(&mut rng);
        let u = ControlInput::new(0.2, Vector3::new(1e-4, 0.0, 0.0));
        let zero = augment_deriv(&model, UncertaintyAccels::default());
        assert_eq!(zero.deriv(&x, &u), knode_deriv(&model, &x, &u));
        let lifted = augment_deriv(
            &model,
            UncertaintyAccels { f_sigma: Vector3::new(0.0, 0.0, 1.0), m_sigma: Vector3::zeros() },
        );
        let diff = lifted.deriv(&x, &u) - knode_deriv(&model, &x, &u);
        let mut expected = StateDeriv::zeros();
        expected[VEL + 2] = 1.0;
        assert_relative_eq!(diff, expected, epsilon = 1e-15);
    }

    #[test]
    fn hover_balance_with_downward_residual() {
        let p = QuadrotorParams::with_mass(0.03).unwrap();
        let a = 1.7;
        let aug = augment_deriv(
            &p,
            UncertaintyAccels { f_sigma: Vector3::new(0.0, 0.0, -a), m_sigma: Vector3::zeros() },
        );
        let x = State::at_rest(Vector3::zeros());
        let u = ControlInput::new(p.mass * (9.81 + a), Vector3::zeros());
        assert!(aug.deriv(&x, &u)[VEL + 2].abs() < 1e-14);
        assert!(nominal_deriv(&x, &u, &p)[VEL + 2] > 0.0);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = L1Config { a_diag: Vector6::repeat(0.5), ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = L1Config { period: 0.0, ..Default::default() };
        assert!(cfg.validate().is_err());
        assert!(L1Config::hardware_preset(0.01).validate().is_ok());
    }
}
