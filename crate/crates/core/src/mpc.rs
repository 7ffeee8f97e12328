//! Finite-horizon tracking OCP transcribed by direct multiple shooting and
//! solved with a Gauss-Newton SQP.
//!
//! ```text
//! min  sum_{i<N} |x_i - x_ref,i|^2_Q + |u_i - u_ref|^2_R + |x_N - x_ref,N|^2_P
//! s.t. x_0 = x(k),  x_{i+1} = F(x_i, u_i),  u_min <= u_i <= u_max
//! ```
//!
//! Every SQP iteration linearizes the shooting map, condenses the state
//! increments out of the QP and solves the remaining box-constrained QP in
//! the input increments. Steps are globalized by backtracking on an l1
//! merit function.

use nalgebra::{Matrix4, SMatrix, Vector4};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    rk4, rk4_step_with_jacobian, ControlInput, Dynamics, InputJacobian, InputVec, QuadrotorParams,
    State, StateJacobian, StateVec, INPUT_DIM, QUAT, STATE_DIM,
};
use crate::error::{Error, Result};

pub type StateWeight = SMatrix<f64, STATE_DIM, STATE_DIM>;

/// Default diagonal of `Q`: position, velocity, quaternion, body rates.
pub const DEFAULT_Q_DIAG: [f64; STATE_DIM] =
    [20.0, 20.0, 40.0, 2.0, 2.0, 4.0, 1.0, 1.0, 1.0, 1.0, 0.1, 0.1, 0.1];
pub const DEFAULT_R_DIAG: [f64; INPUT_DIM] = [0.5, 10.0, 10.0, 10.0];
pub const DEFAULT_TERMINAL_FACTOR: f64 = 5.0;
pub const DEFAULT_TORQUE_LIMIT: f64 = 5e-3;
pub const DEFAULT_THRUST_FACTOR: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub max_iterations: usize,
    pub kkt_tolerance: f64,
    /// Sufficient-decrease constant of the line search.
    pub armijo: f64,
    /// Step contraction factor of the line search.
    pub backtrack: f64,
    /// Smallest step length tried before giving up.
    pub min_step: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iterations: 30,
            kkt_tolerance: 1e-6,
            armijo: 1e-4,
            backtrack: 0.5,
            min_step: 1e-4,
        }
    }
}

/// Component-wise box on the state; `None` leaves a side open.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateBox {
    pub lower: [Option<f64>; STATE_DIM],
    pub upper: [Option<f64>; STATE_DIM],
}

impl StateBox {
    pub fn unbounded() -> Self {
        Self { lower: [None; STATE_DIM], upper: [None; STATE_DIM] }
    }

    fn violation(&self, x: &StateVec) -> f64 {
        let mut v: f64 = 0.0;
        for c in 0..STATE_DIM {
            if let Some(lo) = self.lower[c] {
                v = v.max(lo - x[c]);
            }
            if let Some(hi) = self.upper[c] {
                v = v.max(x[c] - hi);
            }
        }
        v
    }

    fn validate(&self) -> Result<()> {
        for c in 0..STATE_DIM {
            if let (Some(lo), Some(hi)) = (self.lower[c], self.upper[c]) {
                if !(lo <= hi) {
                    return Err(Error::Config(format!("state bound {c}: lower {lo} above upper {hi}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcpConfig {
    pub horizon: usize,
    pub dt: f64,
    pub q: StateWeight,
    pub r: Matrix4<f64>,
    pub p: StateWeight,
    pub u_min: Vector4<f64>,
    pub u_max: Vector4<f64>,
    /// Input the `R` penalty is measured from.
    pub u_ref: Vector4<f64>,
    pub state_bounds: Option<StateBox>,
    pub terminal_set: Option<StateBox>,
    pub solver: SolverSettings,
}

impl OcpConfig {
    /// Defaults for a vehicle the controller believes has parameters `p`.
    pub fn default_for(p: &QuadrotorParams) -> Self {
        MpcSettings::default().to_ocp(p).expect("default settings are valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config("shooting interval must be positive".into()));
        }
        check_psd("Q", &self.q)?;
        check_psd("P", &self.p)?;
        if (self.r - self.r.transpose()).amax() > 1e-12 * (1.0 + self.r.amax()) {
            return Err(Error::Config("R must be symmetric".into()));
        }
        if self.r.cholesky().is_none() {
            return Err(Error::Config("R must be positive definite".into()));
        }
        for i in 0..INPUT_DIM {
            if !(self.u_min[i] <= self.u_max[i]) {
                return Err(Error::Config(format!(
                    "input bound {i}: lower {} above upper {}",
                    self.u_min[i], self.u_max[i]
                )));
            }
        }
        if self.u_ref.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("input reference must be finite".into()));
        }
        if let Some(b) = &self.state_bounds {
            b.validate()?;
        }
        if let Some(b) = &self.terminal_set {
            b.validate()?;
        }
        let s = &self.solver;
        if s.max_iterations == 0 || !(s.kkt_tolerance > 0.0) {
            return Err(Error::Config("solver needs at least one iteration and a positive tolerance".into()));
        }
        if !(s.backtrack > 0.0 && s.backtrack < 1.0) || !(s.armijo > 0.0 && s.armijo < 0.5) {
            return Err(Error::Config("line-search constants out of range".into()));
        }
        Ok(())
    }

    fn bounds_at(&self, i: usize) -> Option<&StateBox> {
        if i == self.horizon && self.terminal_set.is_some() {
            self.terminal_set.as_ref()
        } else {
            self.state_bounds.as_ref()
        }
    }

    fn weight(&self, i: usize) -> &StateWeight {
        if i == self.horizon {
            &self.p
        } else {
            &self.q
        }
    }

    /// Per-channel scaling of the QP variables.
    fn input_scale(&self) -> Vector4<f64> {
        Vector4::from_fn(|i, _| {
            let half = 0.5 * (self.u_max[i] - self.u_min[i]);
            if half.is_finite() && half > 0.0 {
                half
            } else {
                1.0
            }
        })
    }
}

/// Diagonal-weight form of the OCP settings, resolved against the believed
/// vehicle by [`MpcSettings::to_ocp`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcSettings {
    pub horizon: usize,
    pub dt: f64,
    pub q_diag: [f64; STATE_DIM],
    pub r_diag: [f64; INPUT_DIM],
    /// `P = terminal_factor * Q`.
    pub terminal_factor: f64,
    /// Upper thrust bound as a multiple of the believed hover thrust.
    pub thrust_factor: f64,
    /// N m
    pub torque_limit: f64,
    pub solver: SolverSettings,
}

impl Default for MpcSettings {
    fn default() -> Self {
        Self {
            horizon: 20,
            dt: 0.02,
            q_diag: DEFAULT_Q_DIAG,
            r_diag: DEFAULT_R_DIAG,
            terminal_factor: DEFAULT_TERMINAL_FACTOR,
            thrust_factor: DEFAULT_THRUST_FACTOR,
            torque_limit: DEFAULT_TORQUE_LIMIT,
            solver: SolverSettings::default(),
        }
    }
}

impl MpcSettings {
    pub fn to_ocp(&self, believed: &QuadrotorParams) -> Result<OcpConfig> {
        let hover = believed.mass * believed.gravity.z;
        let q = StateWeight::from_diagonal(&StateVec::from_row_slice(&self.q_diag));
        let cfg = OcpConfig {
            horizon: self.horizon,
            dt: self.dt,
            q,
            r: Matrix4::from_diagonal(&Vector4::from_row_slice(&self.r_diag)),
            p: q * self.terminal_factor,
            u_min: Vector4::new(0.0, -self.torque_limit, -self.torque_limit, -self.torque_limit),
            u_max: Vector4::new(self.thrust_factor * hover, self.torque_limit, self.torque_limit, self.torque_limit),
            u_ref: Vector4::new(hover, 0.0, 0.0, 0.0),
            state_bounds: None,
            terminal_set: None,
            solver: self.solver,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn check_psd(name: &str, m: &StateWeight) -> Result<()> {
    if (m - m.transpose()).amax() > 1e-12 * (1.0 + m.amax()) {
        return Err(Error::Config(format!("{name} must be symmetric")));
    }
    let min_eig = m.symmetric_eigenvalues().min();
    if min_eig < -1e-12 * (1.0 + m.amax()) {
        return Err(Error::Config(format!("{name} must be positive semidefinite")));
    }
    Ok(())
}

/// Reference states `x_ref,0 .. x_ref,N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceWindow {
    pub states: Vec<State>,
}

impl ReferenceWindow {
    pub fn new(states: Vec<State>) -> Result<Self> {
        for (i, s) in states.iter().enumerate() {
            if !s.is_finite() || (s.q.norm() - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidState(format!("reference state {i} is not a valid state")));
            }
        }
        Ok(Self { states })
    }

    pub fn constant(x: State, horizon: usize) -> Result<Self> {
        Self::new(vec![x; horizon + 1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    LineSearchFailed,
    QpFailed,
}

/// Initial iterate for the SQP.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialGuess {
    pub states: Vec<State>,
    pub inputs: Vec<ControlInput>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcpSolution {
    pub u_star: Vec<ControlInput>,
    pub x_pred: Vec<State>,
    pub iterations: usize,
    pub kkt: f64,
    pub cost: f64,
    pub status: SolveStatus,
    /// Multipliers of the state-box rows per node: positive on an active
    /// upper bound, negative on an active lower bound.
    pub state_multipliers: Vec<StateVec>,
}

impl OcpSolution {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }

    pub fn as_guess(&self) -> InitialGuess {
        InitialGuess { states: self.x_pred.clone(), inputs: self.u_star.clone() }
    }
}

/// `x_{i+1} = F(x_i, u_i)`: one RK4 step of a continuous model with
/// quaternion renormalization.
#[derive(Debug, Clone, Copy)]
pub struct StepMap<'a, M: ?Sized> {
    pub model: &'a M,
    pub dt: f64,
}

pub fn discretize<M: Dynamics + ?Sized>(model: &M, dt: f64) -> Result<StepMap<'_, M>> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Precondition(format!("step must be positive, got {dt}")));
    }
    Ok(StepMap { model, dt })
}

impl<M: Dynamics + ?Sized> StepMap<'_, M> {
    pub fn step(&self, x: &State, u: &ControlInput) -> Result<State> {
        crate::dynamics::rk4_step(|s, c| self.model.deriv(s, c), x, u, self.dt)
    }

    pub fn step_with_jacobian(&self, x: &StateVec, u: &InputVec) -> (StateVec, StateJacobian, InputJacobian) {
        rk4_step_with_jacobian(self.model, x, &ControlInput::from_vector(u), self.dt)
    }

    /// `F(x, u)` on raw vectors; no validity checks.
    pub fn step_vec(&self, x: &StateVec, u: &InputVec) -> StateVec {
        let uc = ControlInput::from_vector(u);
        let mut y = rk4(|_, y| self.model.deriv(&State::from_vector(y), &uc), 0.0, x, self.dt);
        let q = y.fixed_rows::<4>(QUAT).into_owned();
        y.fixed_rows_mut::<4>(QUAT).copy_from(&(q / q.norm()));
        y
    }
}

/// Drop the first node, repeat the last one.
pub fn warm_start_shift(prev: &OcpSolution) -> Result<InitialGuess> {
    let n = prev.u_star.len();
    if n < 2 || prev.x_pred.len() != n + 1 {
        return Err(Error::Precondition("warm start needs a horizon of at least 2".into()));
    }
    let mut inputs = prev.u_star[1..].to_vec();
    inputs.push(prev.u_star[n - 1]);
    let mut states = prev.x_pred[1..].to_vec();
    states.push(prev.x_pred[n]);
    Ok(InitialGuess { states, inputs })
}

struct Linearization {
    next: Vec<StateVec>,
    a: Vec<StateJacobian>,
    b: Vec<InputJacobian>,
}

struct Problem<'m, 'a, M: ?Sized> {
    map: &'m StepMap<'a, M>,
    cfg: &'m OcpConfig,
    refs: Vec<StateVec>,
}

/// Flip reference quaternions onto the hemisphere of the iterate.
fn align_refs(refs: &[StateVec], xs: &[StateVec]) -> Vec<StateVec> {
    refs.iter()
        .zip(xs)
        .map(|(r, x)| {
            let mut r = *r;
            let dot = r.fixed_rows::<4>(QUAT).dot(&x.fixed_rows::<4>(QUAT));
            if dot < 0.0 {
                let flipped = -r.fixed_rows::<4>(QUAT);
                r.fixed_rows_mut::<4>(QUAT).copy_from(&flipped);
            }
            r
        })
        .collect()
}

impl<M: Dynamics + ?Sized> Problem<'_, '_, M> {
    fn n(&self) -> usize {
        self.cfg.horizon
    }

    fn linearize(&self, xs: &[StateVec], us: &[InputVec]) -> Linearization {
        let n = self.n();
        let mut lin = Linearization {
            next: Vec::with_capacity(n),
            a: Vec::with_capacity(n),
            b: Vec::with_capacity(n),
        };
        for i in 0..n {
            let (f, a, b) = self.map.step_with_jacobian(&xs[i], &us[i]);
            lin.next.push(f);
            lin.a.push(a);
            lin.b.push(b);
        }
        lin
    }

    fn cost(&self, xs: &[StateVec], us: &[InputVec]) -> f64 {
        let cfg = self.cfg;
        let mut c = 0.0;
        for i in 0..=self.n() {
            let e = xs[i] - self.refs[i];
            c += (e.transpose() * cfg.weight(i) * e)[0];
        }
        for u in us {
            let e = u - cfg.u_ref;
            c += (e.transpose() * cfg.r * e)[0];
        }
        c
    }

    fn state_violation(&self, xs: &[StateVec]) -> f64 {
        (1..=self.n())
            .filter_map(|i| self.cfg.bounds_at(i).map(|b| b.violation(&xs[i])))
            .fold(0.0, f64::max)
    }

    fn state_violation_sum(&self, xs: &[StateVec]) -> f64 {
        (1..=self.n())
            .filter_map(|i| self.cfg.bounds_at(i).map(|b| b.violation(&xs[i]).max(0.0)))
            .sum()
    }

    /// Adjoints `pi_i = dL/dx_i` from the terminal node backwards.
    fn adjoints(&self, xs: &[StateVec], lin: &Linearization, mults: &[StateVec]) -> Vec<StateVec> {
        let n = self.n();
        let mut pi = vec![StateVec::zeros(); n + 1];
        pi[n] = self.cfg.p * (xs[n] - self.refs[n]) * 2.0 + mults[n];
        for i in (1..n).rev() {
            pi[i] = self.cfg.q * (xs[i] - self.refs[i]) * 2.0 + mults[i] + lin.a[i].tr_mul(&pi[i + 1]);
        }
        pi
    }

    fn kkt(&self, xs: &[StateVec], us: &[InputVec], lin: &Linearization, mults: &[StateVec]) -> f64 {
        let n = self.n();
        let cfg = self.cfg;
        let scale = cfg.input_scale();
        let pi = self.adjoints(xs, lin, mults);
        let mut res: f64 = 0.0;
        for j in 0..n {
            let g = cfg.r * (us[j] - cfg.u_ref) * 2.0 + lin.b[j].tr_mul(&pi[j + 1]);
            for c in 0..INPUT_DIM {
                let u = us[j][c];
                let projected = (u - g[c] * scale[c] * scale[c]).clamp(cfg.u_min[c], cfg.u_max[c]);
                res = res.max((u - projected).abs() / scale[c]);
                res = res.max(cfg.u_min[c] - u).max(u - cfg.u_max[c]);
            }
        }
        for i in 0..n {
            res = res.max((lin.next[i] - xs[i + 1]).amax());
        }
        res = res.max(self.state_violation(xs));
        for i in 1..=n {
            if let Some(b) = cfg.bounds_at(i) {
                for c in 0..STATE_DIM {
                    let m = mults[i][c];
                    if m > 0.0 {
                        res = res.max(m * b.upper[c].map_or(f64::INFINITY, |hi| hi - xs[i][c]).abs());
                    } else if m < 0.0 {
                        res = res.max(-m * b.lower[c].map_or(f64::INFINITY, |lo| xs[i][c] - lo).abs());
                    }
                }
            } else if mults[i].amax() > 0.0 {
                res = res.max(mults[i].amax());
            }
        }
        res
    }
}

struct QpStep {
    du: Vec<InputVec>,
    dx: Vec<StateVec>,
    mults: Vec<StateVec>,
}

/// Condense the linearized dynamics and solve the input-increment QP.
fn solve_subproblem<M: Dynamics + ?Sized>(
    prob: &Problem<'_, '_, M>,
    xs: &[StateVec],
    us: &[InputVec],
    lin: &Linearization,
) -> Option<QpStep> {
    let n = prob.n();
    let cfg = prob.cfg;
    let nv = INPUT_DIM * n;
    let d = cfg.input_scale();
    let dmat = Matrix4::from_diagonal(&d);

    let defects: Vec<StateVec> = (0..n).map(|i| lin.next[i] - xs[i + 1]).collect();
    // affine part of the state increments
    let mut s = vec![StateVec::zeros(); n + 1];
    for i in 0..n {
        s[i + 1] = lin.a[i] * s[i] + defects[i];
    }

    // sens[k][i - k - 1] = d x_i / d u_k for i > k
    let mut sens: Vec<Vec<InputJacobian>> = Vec::with_capacity(n);
    for k in 0..n {
        let mut col = Vec::with_capacity(n - k);
        col.push(lin.b[k]);
        for i in (k + 1)..n {
            let next = lin.a[i] * col[i - k - 1];
            col.push(next);
        }
        sens.push(col);
    }

    let mut hess = vec![0.0; nv * nv];
    for k in 0..n {
        // m = sum over later nodes of the propagated W G
        let mut m = cfg.p * sens[k][n - k - 1];
        let mut blocks: Vec<Matrix4<f64>> = vec![Matrix4::zeros(); n - k];
        for j in (k..n).rev() {
            if j < n - 1 {
                m = cfg.q * sens[k][j - k] + lin.a[j + 1].tr_mul(&m);
            }
            blocks[j - k] = lin.b[j].tr_mul(&m) * 2.0;
        }
        for j in k..n {
            let mut hjk = blocks[j - k];
            if j == k {
                hjk += cfg.r * 2.0;
            }
            let hjk = dmat * hjk * dmat;
            for r in 0..INPUT_DIM {
                for c in 0..INPUT_DIM {
                    hess[(j * INPUT_DIM + r) * nv + k * INPUT_DIM + c] = hjk[(r, c)];
                    hess[(k * INPUT_DIM + c) * nv + j * INPUT_DIM + r] = hjk[(r, c)];
                }
            }
        }
    }

    let mut lam = cfg.p * (xs[n] + s[n] - prob.refs[n]) * 2.0;
    let mut grad = vec![0.0; nv];
    for j in (0..n).rev() {
        let g = d.component_mul(&(cfg.r * (us[j] - cfg.u_ref) * 2.0 + lin.b[j].tr_mul(&lam)));
        grad[j * INPUT_DIM..(j + 1) * INPUT_DIM].copy_from_slice(g.as_slice());
        if j > 0 {
            lam = cfg.q * (xs[j] + s[j] - prob.refs[j]) * 2.0 + lin.a[j].tr_mul(&lam);
        }
    }

    let mut amat = Vec::new();
    let mut bvec = Vec::new();
    for j in 0..n {
        for c in 0..INPUT_DIM {
            let idx = j * INPUT_DIM + c;
            if cfg.u_max[c].is_finite() {
                let mut row = vec![0.0; nv];
                row[idx] = 1.0;
                amat.extend(row);
                bvec.push((cfg.u_max[c] - us[j][c]) / d[c]);
            }
            if cfg.u_min[c].is_finite() {
                let mut row = vec![0.0; nv];
                row[idx] = -1.0;
                amat.extend(row);
                bvec.push((us[j][c] - cfg.u_min[c]) / d[c]);
            }
        }
    }
    let n_input_rows = bvec.len();
    // (node, component, sign) of each state row
    let mut state_rows = Vec::new();
    for i in 1..=n {
        let Some(b) = cfg.bounds_at(i) else { continue };
        for c in 0..STATE_DIM {
            for (bound, sign) in [(b.upper[c], 1.0), (b.lower[c], -1.0)] {
                let Some(v) = bound else { continue };
                let mut row = vec![0.0; nv];
                for k in 0..i {
                    let g = sens[k][i - k - 1];
                    for cc in 0..INPUT_DIM {
                        row[k * INPUT_DIM + cc] = sign * g[(c, cc)] * d[cc];
                    }
                }
                amat.extend(row);
                bvec.push(sign * (v - xs[i][c] - s[i][c]));
                state_rows.push((i, c, sign));
            }
        }
    }

    let sol = quadprog::solve_qp(&mut hess, &grad, &amat, &bvec, 0, false).ok()?;
    if sol.sol.iter().any(|v| !v.is_finite()) {
        return None;
    }

    let du: Vec<InputVec> = (0..n)
        .map(|j| InputVec::from_column_slice(&sol.sol[j * INPUT_DIM..(j + 1) * INPUT_DIM]).component_mul(&d))
        .collect();
    let mut dx = vec![StateVec::zeros(); n + 1];
    for i in 0..n {
        dx[i + 1] = lin.a[i] * dx[i] + lin.b[i] * du[i] + defects[i];
    }
    let mut mults = vec![StateVec::zeros(); n + 1];
    for (r, (i, c, sign)) in state_rows.iter().enumerate() {
        mults[*i][*c] += sign * sol.lagr[n_input_rows + r];
    }
    Some(QpStep { du, dx, mults })
}

fn snap_to_bounds(u: &mut InputVec, cfg: &OcpConfig, scale: &Vector4<f64>) {
    for c in 0..INPUT_DIM {
        let tol = 1e-10 * scale[c];
        if (u[c] - cfg.u_max[c]).abs() <= tol {
            u[c] = cfg.u_max[c];
        }
        if (u[c] - cfg.u_min[c]).abs() <= tol {
            u[c] = cfg.u_min[c];
        }
        u[c] = u[c].clamp(cfg.u_min[c], cfg.u_max[c]);
    }
}

fn check_problem(x0: &State, refw: &ReferenceWindow, cfg: &OcpConfig, dt: f64) -> Result<()> {
    if !x0.is_finite() || (x0.q.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidState("initial state is not a valid state".into()));
    }
    if refw.states.len() != cfg.horizon + 1 {
        return Err(Error::Precondition(format!(
            "reference window has {} states, horizon {} needs {}",
            refw.states.len(),
            cfg.horizon,
            cfg.horizon + 1
        )));
    }
    if (dt - cfg.dt).abs() > 1e-15 {
        return Err(Error::Precondition(format!("step map uses dt = {dt}, config has {}", cfg.dt)));
    }
    Ok(())
}

/// Solve the tracking OCP from `x0`. Solver trouble never raises; it is
/// reported through the status of the returned best iterate.
pub fn solve_ocp<M: Dynamics + ?Sized>(
    map: &StepMap<'_, M>,
    x0: &State,
    refw: &ReferenceWindow,
    cfg: &OcpConfig,
    warm: Option<&InitialGuess>,
) -> Result<OcpSolution> {
    check_problem(x0, refw, cfg, map.dt)?;
    let n = cfg.horizon;
    let scale = cfg.input_scale();
    let raw_refs: Vec<StateVec> = refw.states.iter().map(State::to_vector).collect();

    let (mut xs, mut us): (Vec<StateVec>, Vec<InputVec>) = match warm {
        Some(g) if g.inputs.len() == n && g.states.len() == n + 1 => {
            let mut xs: Vec<StateVec> = g.states.iter().map(State::to_vector).collect();
            xs[0] = x0.to_vector();
            let us = g
                .inputs
                .iter()
                .map(|u| {
                    let mut v = u.to_vector();
                    snap_to_bounds(&mut v, cfg, &scale);
                    v
                })
                .collect();
            (xs, us)
        }
        _ => {
            let mut u = cfg.u_ref;
            snap_to_bounds(&mut u, cfg, &scale);
            let mut xs = vec![x0.to_vector()];
            for i in 0..n {
                xs.push(map.step_vec(&xs[i], &u));
            }
            (xs, vec![u; n])
        }
    };

    let mut prob = Problem { map, cfg, refs: align_refs(&raw_refs, &xs) };
    let mut mults = vec![StateVec::zeros(); n + 1];
    let mut nu = 0.0;
    let mut iterations = 0;
    let mut best: Option<(f64, Vec<StateVec>, Vec<InputVec>, Vec<StateVec>, Vec<StateVec>)> = None;
    let mut status = SolveStatus::MaxIterations;

    loop {
        prob.refs = align_refs(&raw_refs, &xs);
        let lin = prob.linearize(&xs, &us);
        let kkt = prob.kkt(&xs, &us, &lin, &mults);
        if best.as_ref().is_none_or(|b| kkt < b.0 || !b.0.is_finite()) {
            best = Some((kkt, xs.clone(), us.clone(), mults.clone(), prob.refs.clone()));
        }
        if kkt <= cfg.solver.kkt_tolerance {
            status = SolveStatus::Converged;
            break;
        }
        if iterations >= cfg.solver.max_iterations {
            break;
        }
        let Some(step) = solve_subproblem(&prob, &xs, &us, &lin) else {
            status = SolveStatus::QpFailed;
            break;
        };

        // penalty must dominate the multipliers of the linearized dynamics
        let mut trial_x: Vec<StateVec> = xs.iter().zip(&step.dx).map(|(x, d)| x + d).collect();
        let pi = prob.adjoints(&trial_x, &lin, &step.mults);
        let pi_max = pi.iter().map(|p| p.amax()).fold(0.0, f64::max);
        nu = f64::max(nu, 2.0 * pi_max + 1e-8);

        let defect_l1: f64 = (0..n).map(|i| (lin.next[i] - xs[i + 1]).lp_norm(1)).sum();
        let merit0 = prob.cost(&xs, &us) + nu * (defect_l1 + prob.state_violation_sum(&xs));
        let mut slope = -nu * defect_l1;
        for i in 0..=n {
            slope += (cfg.weight(i) * (xs[i] - prob.refs[i]) * 2.0).dot(&step.dx[i]);
        }
        for j in 0..n {
            slope += (cfg.r * (us[j] - cfg.u_ref) * 2.0).dot(&step.du[j]);
        }
        slope = slope.min(0.0);

        let mut alpha = 1.0;
        let mut accepted = false;
        let mut trial_u: Vec<InputVec> = Vec::new();
        while alpha >= cfg.solver.min_step {
            trial_x = xs.iter().zip(&step.dx).map(|(x, d)| x + d * alpha).collect();
            trial_u = us
                .iter()
                .zip(&step.du)
                .map(|(u, d)| {
                    let mut v = u + d * alpha;
                    snap_to_bounds(&mut v, cfg, &scale);
                    v
                })
                .collect();
            let defects: f64 = (0..n)
                .map(|i| (map.step_vec(&trial_x[i], &trial_u[i]) - trial_x[i + 1]).lp_norm(1))
                .sum();
            let merit = prob.cost(&trial_x, &trial_u) + nu * (defects + prob.state_violation_sum(&trial_x));
            if merit.is_finite() && merit <= merit0 + cfg.solver.armijo * alpha * slope {
                accepted = true;
                break;
            }
            alpha *= cfg.solver.backtrack;
        }
        if !accepted {
            status = SolveStatus::LineSearchFailed;
            break;
        }
        xs = trial_x;
        us = trial_u;
        mults = step.mults.iter().map(|m| m * alpha).collect();
        iterations += 1;
    }

    let (kkt, xs, us, mults, refs) = best.expect("at least one iterate is evaluated");
    prob.refs = refs;
    let cost = prob.cost(&xs, &us);
    Ok(OcpSolution {
        u_star: us.iter().map(ControlInput::from_vector).collect(),
        x_pred: xs.iter().map(State::from_vector).collect(),
        iterations,
        kkt,
        cost,
        status,
        state_multipliers: mults,
    })
}

/// Infinity norm of stationarity (in scaled input units), dynamics defects,
/// bound violations and complementarity at a candidate solution.
pub fn kkt_residual<M: Dynamics + ?Sized>(
    sol: &OcpSolution,
    map: &StepMap<'_, M>,
    x0: &State,
    refw: &ReferenceWindow,
    cfg: &OcpConfig,
) -> Result<f64> {
    check_problem(x0, refw, cfg, map.dt)?;
    let n = cfg.horizon;
    if sol.u_star.len() != n || sol.x_pred.len() != n + 1 {
        return Err(Error::Precondition("solution shape does not match the horizon".into()));
    }
    let mut xs: Vec<StateVec> = sol.x_pred.iter().map(State::to_vector).collect();
    let us: Vec<InputVec> = sol.u_star.iter().map(ControlInput::to_vector).collect();
    let raw_refs: Vec<StateVec> = refw.states.iter().map(State::to_vector).collect();
    let initial_gap = (xs[0] - x0.to_vector()).amax();
    xs[0] = x0.to_vector();
    let prob = Problem { map, cfg, refs: align_refs(&raw_refs, &xs) };
    let lin = prob.linearize(&xs, &us);
    let mults = if sol.state_multipliers.len() == n + 1 {
        sol.state_multipliers.clone()
    } else {
        vec![StateVec::zeros(); n + 1]
    };
    Ok(prob.kkt(&xs, &us, &lin, &mults).max(initial_gap))
}

/// Cost of a given trajectory under `cfg`, with reference quaternions aligned
/// to the trajectory.
pub fn trajectory_cost(xs: &[State], us: &[ControlInput], refw: &ReferenceWindow, cfg: &OcpConfig) -> f64 {
    let xv: Vec<StateVec> = xs.iter().map(State::to_vector).collect();
    let uv: Vec<InputVec> = us.iter().map(ControlInput::to_vector).collect();
    let raw: Vec<StateVec> = refw.states.iter().map(State::to_vector).collect();
    let refs = align_refs(&raw, &xv);
    let mut c = 0.0;
    for i in 0..xv.len() {
        let e = xv[i] - refs[i];
        let w = if i + 1 == xv.len() { &cfg.p } else { &cfg.q };
        c += (e.transpose() * w * e)[0];
    }
    for u in &uv {
        let e = u - cfg.u_ref;
        c += (e.transpose() * cfg.r * e)[0];
    }
    c
}
